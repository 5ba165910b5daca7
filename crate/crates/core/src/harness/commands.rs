use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::evaluate_accuracy;
use crate::attention::{AttentionMode, Measure};
use crate::datagen::{make_domain_pair_datasets, mix_seed, Dataset, DomainStreams};
use crate::em_trainer::{run_training, train_supervised, EvalResult, MetricsRecord, RunSettings, SyncEvent};
use crate::error::{ensure, Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Network, ParamsSnapshot};
use crate::par::Exec;
use crate::translation::Direction;

/// Streams for training plus held-out labeled test sets in both domains.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub streams: DomainStreams,
    pub source_test: Dataset,
    pub target_test: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let params = cfg.translator.build()?;
    let streams = make_domain_pair_datasets(&train, &params)?;
    let target_test = test.translated(&params, Direction::SourceToTarget)?;
    Ok(PreparedData {
        streams,
        source_test: test,
        target_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub seed: u64,
    pub source_test_acc: f64,
    pub source_only_target_acc: f64,
    pub checkpoint_hash: String,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SourceOutcome {
    pub network: Network<f32>,
    pub report: SourceReport,
}

/// Train the source network on the real source stream only.
pub fn train_source(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<SourceOutcome> {
    let mut net = Network::<f32>::build(cfg.network.clone(), seed)?;
    let mut final_loss = f64::NAN;
    train_supervised(
        &mut net,
        &data.streams.source,
        cfg.source.steps,
        cfg.source.batch_size,
        &cfg.source.lr_schedule,
        mix_seed(seed, 0x5eed),
        |step, loss| {
            final_loss = loss;
            if step % 100 == 0 {
                log::debug!("source step {step}: ce {loss:.4}");
            }
        },
    )?;
    let report = SourceReport {
        seed,
        source_test_acc: evaluate_accuracy(&net, &data.source_test)?,
        source_only_target_acc: evaluate_accuracy(&net, &data.target_test)?,
        checkpoint_hash: net.snapshot().content_hash(),
        final_loss,
    };
    log::info!(
        "source seed {seed}: source-test {:.4}, source-only target {:.4}",
        report.source_test_acc,
        report.source_only_target_acc
    );
    Ok(SourceOutcome { network: net, report })
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub network: Network<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub syncs: Vec<SyncEvent>,
    pub adapted_acc: f64,
}

/// Adapt a target network from `source` with the config's EM settings.
pub fn adapt(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    source: &ParamsSnapshot<f32>,
    seed: u64,
) -> Result<AdaptOutcome> {
    let mut eval = |net: &Network<f32>| -> Result<EvalResult> {
        Ok(EvalResult {
            target_acc: evaluate_accuracy(net, &data.target_test)?,
            source_acc: Some(evaluate_accuracy(net, &data.source_test)?),
        })
    };
    let settings = RunSettings {
        comp: &cfg.batch,
        config: &cfg.em,
        flags: &cfg.flags,
        steps: cfg.steps,
        seed,
        eval_every: cfg.eval_every,
        exec: Exec::default(),
    };
    let outcome = run_training(&cfg.network, Some(source), &data.streams, &settings, Some(&mut eval))?;
    let adapted_acc = match outcome.metrics.iter().rev().find_map(|m| m.eval_acc) {
        Some(acc) => acc,
        None => evaluate_accuracy(&outcome.network, &data.target_test)?,
    };
    Ok(AdaptOutcome {
        network: outcome.network,
        metrics: outcome.metrics,
        syncs: outcome.syncs,
        adapted_acc,
    })
}

// ---------------------------------------------------------------------------
// Files

fn ensure_writable(dir: &Path, marker: &str, force: bool) -> Result<()> {
    let path = dir.join(marker);
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metrics.jsonl`, `syncs.jsonl` and `curves.csv` (accuracy and loss terms per step).
pub fn write_run_files(dir: &Path, metrics: &[MetricsRecord], syncs: &[SyncEvent]) -> Result<()> {
    write_text(&dir.join("metrics.jsonl"), &jsonl(metrics)?)?;
    write_text(&dir.join("syncs.jsonl"), &jsonl(syncs)?)?;
    let mut csv = String::from("step,target_acc,source_acc,at,ce,em,kept_fraction,lr\n");
    for m in metrics {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            m.step,
            opt(m.eval_acc),
            opt(m.source_eval_acc),
            m.at,
            m.ce,
            m.em,
            m.kept_fraction,
            m.lr
        );
    }
    write_text(&dir.join("curves.csv"), &csv)
}

/// Mean of the alignment term over the final quarter of a run.
pub fn tail_mean_at(metrics: &[MetricsRecord]) -> f64 {
    let start = metrics.len() - metrics.len().div_ceil(4);
    let tail = &metrics[start..];
    tail.iter().map(|m| m.at).sum::<f64>() / tail.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_train_source(cfg: &ExperimentConfig, force: bool) -> Result<SourceReport> {
    let out = cfg.resolved_output_dir();
    ensure_writable(&out, "source.json", force)?;
    let data = prepare_data(cfg)?;
    let outcome = train_source(cfg, &data, cfg.seed)?;
    save_checkpoint(&out.join("source"), &outcome.network, cfg.seed, cfg.source.steps)?;
    write_json(&out.join("source_report.json"), &outcome.report)?;
    cfg.save(&out.join("config.json"))?;
    Ok(outcome.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub source_only_acc: f64,
    pub adapted_acc: f64,
    pub source_test_acc: f64,
    pub config: ExperimentConfig,
}

/// Load a source checkpoint, refusing one built for a different network.
pub fn load_source(cfg: &ExperimentConfig, base: &Path) -> Result<ParamsSnapshot<f32>> {
    let (manifest, snapshot) = load_checkpoint(base)?;
    let expected = cfg.network.hash();
    if manifest.spec_hash != expected {
        return Err(Error::SpecMismatch {
            expected,
            found: manifest.spec_hash,
        });
    }
    Ok(snapshot)
}

pub fn cmd_adapt(cfg: &ExperimentConfig, source_base: &Path, force: bool) -> Result<AdaptReport> {
    let out = cfg.resolved_output_dir();
    let snapshot = load_source(cfg, source_base)?;
    ensure_writable(&out, "metrics.jsonl", force)?;
    let data = prepare_data(cfg)?;
    let source_net = Network::from_snapshot(cfg.network.clone(), &snapshot)?;
    let source_only_acc = evaluate_accuracy(&source_net, &data.target_test)?;
    let source_test_acc = evaluate_accuracy(&source_net, &data.source_test)?;
    let outcome = adapt(cfg, &data, &snapshot, cfg.seed)?;
    write_run_files(&out, &outcome.metrics, &outcome.syncs)?;
    save_checkpoint(&out.join("target"), &outcome.network, cfg.seed, cfg.steps)?;
    let report = AdaptReport {
        source_only_acc,
        adapted_acc: outcome.adapted_acc,
        source_test_acc,
        config: cfg.clone(),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Grids

/// One adaptation run inside a grid.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub variant: String,
    pub seed: u64,
    pub acc: f64,
    pub source_only_acc: f64,
    pub metrics: Vec<MetricsRecord>,
    pub run_dir: PathBuf,
}

/// A CSV row; `seed` is `None` for the per-variant aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub collapse_flag: bool,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub runs: Vec<GridRun>,
    pub rows: Vec<GridRow>,
    pub sources: Vec<SourceReport>,
}

impl GridResult {
    pub fn mean_acc(&self, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed.is_none())
            .map(|r| r.acc_mean)
    }

    pub fn run(&self, variant: &str, seed: u64) -> Option<&GridRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut csv = String::from("variant,seed,acc_mean,acc_std,collapse_flag\n");
        for r in &self.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "all".into());
            let _ = writeln!(
                csv,
                "{},{},{:.6},{:.6},{}",
                r.variant, seed, r.acc_mean, r.acc_std, r.collapse_flag
            );
        }
        csv
    }
}

/// Accuracy below chance plus ten points counts as collapse.
pub fn is_collapsed(acc: f64, num_classes: usize) -> bool {
    acc < 1.0 / num_classes as f64 + 0.10
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Source network for `seed`: reused from `<out>/sources/seed<k>` when a
/// matching checkpoint exists, trained and saved otherwise.
fn source_for_seed(cfg: &ExperimentConfig, data: &PreparedData, out: &Path, seed: u64) -> Result<(ParamsSnapshot<f32>, SourceReport)> {
    let base = out.join("sources").join(format!("seed{seed}"));
    let report_path = base.with_extension("report.json");
    if base.with_extension("json").exists() && report_path.exists() {
        if let Ok(snapshot) = load_source(cfg, &base) {
            let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
            let report: SourceReport = serde_json::from_str(&text)?;
            if report.checkpoint_hash == snapshot.content_hash() {
                log::info!("reusing source checkpoint {}", base.display());
                return Ok((snapshot, report));
            }
        }
    }
    let outcome = train_source(cfg, data, seed)?;
    save_checkpoint(&base, &outcome.network, seed, cfg.source.steps)?;
    write_json(&report_path, &outcome.report)?;
    Ok((outcome.network.snapshot(), outcome.report))
}

/// Run every variant for every seed, sharing one source network per seed.
/// Variants whose configs coincide are trained once.
pub fn run_grid(base: &ExperimentConfig, variants: &[(String, ExperimentConfig)], out: &Path) -> Result<GridResult> {
    ensure!(!variants.is_empty(), InvalidArgument, "empty variant grid");
    ensure!(!base.seeds.is_empty(), InvalidArgument, "no seeds configured");
    let data = prepare_data(base)?;
    let k = base.network.num_classes;
    let mut runs = Vec::new();
    let mut sources = Vec::new();
    for &seed in &base.seeds {
        let (snapshot, report) = source_for_seed(base, &data, out, seed)?;
        let mut done: HashMap<String, (f64, Vec<MetricsRecord>)> = HashMap::new();
        for (name, cfg) in variants {
            let key = serde_json::to_string(&(&cfg.em, &cfg.flags, &cfg.batch, cfg.steps))?;
            let run_dir = out.join("runs").join(name).join(format!("seed{seed}"));
            let (acc, metrics) = match done.get(&key) {
                Some(hit) => hit.clone(),
                None => {
                    log::info!("run {name} seed {seed}");
                    let o = adapt(cfg, &data, &snapshot, seed)?;
                    done.insert(key, (o.adapted_acc, o.metrics.clone()));
                    (o.adapted_acc, o.metrics)
                }
            };
            write_run_files(&run_dir, &metrics, &[])?;
            log::info!("{name} seed {seed}: target acc {acc:.4}");
            runs.push(GridRun {
                variant: name.clone(),
                seed,
                acc,
                source_only_acc: report.source_only_target_acc,
                metrics,
                run_dir,
            });
        }
        sources.push(report);
    }
    let mut rows = Vec::new();
    for (name, _) in variants {
        let accs: Vec<f64> = runs.iter().filter(|r| &r.variant == name).map(|r| r.acc).collect();
        for r in runs.iter().filter(|r| &r.variant == name) {
            rows.push(GridRow {
                variant: name.clone(),
                seed: Some(r.seed),
                acc_mean: r.acc,
                acc_std: 0.0,
                collapse_flag: is_collapsed(r.acc, k),
            });
        }
        let (mean, std) = mean_std(&accs);
        rows.push(GridRow {
            variant: name.clone(),
            seed: None,
            acc_mean: mean,
            acc_std: std,
            collapse_flag: is_collapsed(mean, k),
        });
    }
    Ok(GridResult { runs, rows, sources })
}

fn finish_grid(out: &Path, csv_name: &str, result: &GridResult) -> Result<()> {
    write_text(&out.join(csv_name), &result.to_csv())?;
    write_json(&out.join("sources.json"), &result.sources)
}

/// `{full, EM-A, EM-B, EM-C}` each with and without the alignment term.
/// Without it β is zero but the term is still computed and logged.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for with_at in [true, false] {
        for name in ["full", "em_a", "em_b", "em_c"] {
            let mut c = cfg.clone();
            match name {
                "em_a" => c.em.sync_period = 1,
                "em_b" => c.flags.use_filter = false,
                "em_c" => c.em.reset_lr_on_sync = false,
                _ => {}
            }
            if !with_at {
                c.em.beta = 0.0;
            }
            let label = if with_at { name.to_string() } else { format!("{name}_wo_at") };
            out.push((label, c));
        }
    }
    out
}

pub fn cmd_ablate(cfg: &ExperimentConfig, force: bool) -> Result<GridResult> {
    let out = cfg.resolved_output_dir();
    ensure_writable(&out, "ablation.csv", force)?;
    let result = run_grid(cfg, &ablation_variants(cfg), &out)?;
    finish_grid(&out, "ablation.csv", &result)?;
    Ok(result)
}

/// Four measures at the configured mode, then four modes with the L2 measure.
pub fn measure_variants(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out: Vec<_> = Measure::ALL
        .iter()
        .map(|&m| (format!("measure_{}", m.name()), cfg.clone().with_measure(m, cfg.flags.mode)))
        .collect();
    out.extend(
        AttentionMode::ALL
            .iter()
            .map(|&a| (format!("mode_{}", a.name()), cfg.clone().with_measure(Measure::L2, a))),
    );
    out
}

pub fn cmd_compare_measures(cfg: &ExperimentConfig, force: bool) -> Result<GridResult> {
    let out = cfg.resolved_output_dir();
    ensure_writable(&out, "measures.csv", force)?;
    let result = run_grid(cfg, &measure_variants(cfg), &out)?;
    finish_grid(&out, "measures.csv", &result)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PT,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::PT => "p_t",
            SweepParam::Beta => "beta",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_t" | "pt" => Ok(SweepParam::PT),
            "beta" => Ok(SweepParam::Beta),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// Drop repeated values, keeping first occurrences, with a warning.
pub fn dedup_values(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &v in values {
        if out.contains(&v) {
            log::warn!("duplicate sweep value {v} ignored");
        } else {
            out.push(v);
        }
    }
    out
}

pub fn sweep_variants(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<(String, ExperimentConfig)>> {
    let values = dedup_values(values);
    ensure!(!values.is_empty(), InvalidArgument, "sweep needs at least one value");
    values
        .into_iter()
        .map(|v| {
            let mut c = cfg.clone();
            match param {
                SweepParam::PT => c.em.p_t = v,
                SweepParam::Beta => c.em.beta = v,
            }
            c.em.validate()?;
            Ok((format!("{}={v}", param.name()), c))
        })
        .collect()
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], force: bool) -> Result<GridResult> {
    let variants = sweep_variants(cfg, param, values)?;
    let out = cfg.resolved_output_dir();
    let name = format!("sweep_{}.csv", param.name());
    ensure_writable(&out, &name, force)?;
    let result = run_grid(cfg, &variants, &out)?;
    finish_grid(&out, &name, &result)?;
    Ok(result)
}
