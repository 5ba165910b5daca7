use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use attalign::attention::{AttentionMode, Measure};
use attalign::datagen::Domain;
use attalign::harness::{self, ExperimentConfig, SweepParam};
use attalign::model::Network;

#[derive(Parser)]
#[command(name = "attalign", version, about = "Domain adaptation with attention alignment and EM pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default configuration (`desk` or `quick`) as JSON.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train the source network on labeled source data.
    TrainSource(Common),
    /// Adapt a target network from a source checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path (without extension).
        #[arg(long)]
        source: PathBuf,
    },
    /// Run the EM-A/B/C and with/without-alignment grid.
    Ablate(Common),
    /// Compare discrepancy measures and attention modes.
    CompareMeasures(Common),
    /// Sweep p_t or beta.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Export attention overlays for a checkpoint.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        layer: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Draw samples from the target test set instead of the source one.
        #[arg(long)]
        target: bool,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults to the desk preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    p_t: Option<f64>,
    #[arg(long)]
    sync_period: Option<u64>,
    #[arg(long)]
    measure: Option<Measure>,
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    no_lr_reset: bool,
    #[arg(long)]
    no_at: bool,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.beta {
            cfg.em.beta = v;
        }
        if let Some(v) = self.p_t {
            cfg.em.p_t = v;
        }
        if let Some(v) = self.sync_period {
            cfg.em.sync_period = v;
        }
        if let Some(v) = self.measure {
            cfg.flags.measure = v;
        }
        if let Some(v) = self.mode {
            cfg.flags.mode = v;
        }
        cfg.flags.use_filter &= !self.no_filter;
        cfg.flags.use_at &= !self.no_at;
        cfg.em.reset_lr_on_sync &= !self.no_lr_reset;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_grid(result: &harness::GridResult) {
    print!("{}", result.to_csv());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { preset } => {
            let cfg = match preset.as_str() {
                "desk" => ExperimentConfig::desk(),
                "quick" => ExperimentConfig::quick(),
                other => anyhow::bail!("unknown preset {other:?} (expected desk or quick)"),
            };
            println!("{}", cfg.to_json()?);
        }
        Command::TrainSource(common) => {
            let cfg = common.config()?;
            let report = harness::cmd_train_source(&cfg, common.force)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Adapt { common, source } => {
            let cfg = common.config()?;
            let report = harness::cmd_adapt(&cfg, &source, common.force)
                .with_context(|| format!("adapting from {}", source.display()))?;
            println!(
                "source-only {:.4}  adapted {:.4}",
                report.source_only_acc, report.adapted_acc
            );
        }
        Command::Ablate(common) => print_grid(&harness::cmd_ablate(&common.config()?, common.force)?),
        Command::CompareMeasures(common) => {
            print_grid(&harness::cmd_compare_measures(&common.config()?, common.force)?)
        }
        Command::Sweep { common, param, values } => {
            print_grid(&harness::cmd_sweep(&common.config()?, param, &values, common.force)?)
        }
        Command::Visualize {
            common,
            checkpoint,
            layer,
            count,
            target,
        } => {
            let cfg = common.config()?;
            let snapshot = harness::load_source(&cfg, &checkpoint)?;
            let net = Network::from_snapshot(cfg.network.clone(), &snapshot)?;
            let data = harness::prepare_data(&cfg)?;
            let (set, domain) = if target {
                (&data.target_test, Domain::RealTarget)
            } else {
                (&data.source_test, Domain::RealSource)
            };
            let xs: Vec<_> = set.samples.iter().take(count).map(|s| s.pixels.clone()).collect();
            let dir = cfg
                .resolved_output_dir()
                .join(format!("overlay_{domain:?}_layer{layer}").to_lowercase());
            let files = harness::export_attention_overlay(&net, &xs, layer, cfg.flags.mode, &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
