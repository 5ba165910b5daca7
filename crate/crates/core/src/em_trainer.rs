//! Target-network training: supervised cross-entropy on the labeled streams,
//! the EM objective on the unlabeled streams, and the full objective
//! `CE + EM + β·AT` with asynchronous posterior updates, confidence filtering
//! and learning-rate schedule resets.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_alignment_loss, AlignmentLayout, AttentionMode, Measure};
use crate::datagen::{compose_batch, Batch, BatchComposition, BatchItem, Dataset, DomainStreams};
use crate::error::{ensure, Error, Result};
use crate::model::{ConvNetSpec, Network, ParamsSnapshot, TapGrads};
use crate::optim::{Adam, LrSchedule, ScheduleState};
use crate::tensor::{log_softmax_row, softmax_row, Matrix, Real, Tensor3};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Steps between posterior-network syncs (`N`).
    pub sync_period: u64,
    /// Confidence threshold after the first periodic sync.
    pub p_t: f64,
    /// Confidence threshold for steps before the first periodic sync.
    pub p_t_initial: f64,
    pub beta: f64,
    pub lr_schedule: LrSchedule,
    pub reset_lr_on_sync: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            sync_period: 500,
            p_t: 0.95,
            p_t_initial: 1.0,
            beta: 1.0,
            lr_schedule: LrSchedule::default(),
            reset_lr_on_sync: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sync_period >= 1, InvalidArgument, "sync_period must be >= 1");
        for (name, p) in [("p_t", self.p_t), ("p_t_initial", self.p_t_initial)] {
            ensure!(p > 0.0 && p <= 1.0, InvalidArgument, "{name} must lie in (0, 1], got {p}");
        }
        ensure!(self.beta >= 0.0, InvalidArgument, "beta must be nonnegative");
        Ok(())
    }

    /// Threshold in force at `step`.
    pub fn threshold_at(&self, step: u64) -> f64 {
        if step < self.sync_period {
            self.p_t_initial
        } else {
            self.p_t
        }
    }
}

/// Switches for ablations and measure comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFlags {
    /// Compute the alignment term at all. When false it is recorded as 0.
    pub use_at: bool,
    /// Confidence filtering of posteriors; off keeps every unlabeled sample.
    pub use_filter: bool,
    pub measure: Measure,
    pub mode: AttentionMode,
    /// Tapped layers entering the alignment term.
    pub layers: Vec<usize>,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            use_at: true,
            use_filter: true,
            measure: Measure::L2,
            mode: AttentionMode::SumSq,
            layers: vec![1, 2],
        }
    }
}

// ---------------------------------------------------------------------------
// E-step

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBatch<F> {
    pub probs: Matrix<F>,
    pub mask: Vec<bool>,
    /// Step at which the posterior network was last synced.
    pub source_step: u64,
}

impl<F: Real> PosteriorBatch<F> {
    pub fn from_probs(probs: Matrix<F>, p_t: f64, source_step: u64) -> Self {
        let mask = confidence_mask(&probs, p_t);
        Self {
            probs,
            mask,
            source_step,
        }
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.kept() as f64 / self.mask.len() as f64
        }
    }

    pub fn unfiltered(mut self) -> Self {
        self.mask.iter_mut().for_each(|m| *m = true);
        self
    }
}

/// `mask[i]` iff `max_z probs[i, z] ≥ p_t`.
pub fn confidence_mask<F: Real>(probs: &Matrix<F>, p_t: f64) -> Vec<bool> {
    let threshold = F::lit(p_t);
    probs
        .iter_rows()
        .map(|r| r.iter().copied().fold(F::neg_infinity(), F::max) >= threshold)
        .collect()
}

/// Posterior of the unlabeled samples under the posterior network. With
/// uniform class and image priors this is the network's own softmax; no
/// gradient is attached.
///
/// The softmax and the threshold test run in f64: an f32 softmax already
/// rounds to exactly 1 at a logit margin of about 17, which would let
/// `p_t = 1` keep confidently wrong rows.
pub fn estimate_posterior<F: Real>(
    m_post: &Network<F>,
    x_t: &[Tensor3<F>],
    p_t: f64,
    source_step: u64,
) -> Result<PosteriorBatch<F>> {
    let logits = m_post.forward(x_t)?;
    let mut probs = Matrix::zeros(logits.rows, logits.cols);
    let mut mask = Vec::with_capacity(logits.rows);
    for i in 0..logits.rows {
        let wide: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let p = softmax_row(&wide);
        mask.push(p.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= p_t);
        for (dst, v) in probs.row_mut(i).iter_mut().zip(p) {
            *dst = F::lit(v);
        }
    }
    Ok(PosteriorBatch {
        probs,
        mask,
        source_step,
    })
}

// ---------------------------------------------------------------------------
// Losses on logits

/// A loss value with its gradient with respect to the logits it consumed.
#[derive(Debug, Clone)]
pub struct LogitLoss<F> {
    pub value: F,
    pub grads: Vec<Matrix<F>>,
}

/// `−mean log p(y|x)` and its logit gradient; zero for an empty batch.
fn mean_ce<F: Real>(logits: &Matrix<F>, labels: &[usize]) -> Result<(F, Matrix<F>)> {
    ensure!(
        logits.rows == labels.len(),
        Shape,
        "{} logit rows for {} labels",
        logits.rows,
        labels.len()
    );
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    if logits.rows == 0 {
        return Ok((F::zero(), grad));
    }
    let inv = F::one() / F::from_usize(logits.rows).expect("count");
    let mut total = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        ensure!(
            y < logits.cols,
            InvalidArgument,
            "label {y} out of range for {} classes",
            logits.cols
        );
        let row = logits.row(i);
        total -= log_softmax_row(row)[y];
        let g = grad.row_mut(i);
        for (gz, p) in g.iter_mut().zip(softmax_row(row)) {
            *gz = p * inv;
        }
        g[y] -= inv;
    }
    Ok((total * inv, grad))
}

/// `−mean log p(y|x^S) − mean log p(y|x̃^T)`.
pub fn ce_from_logits<F: Real>(
    logits_source: &Matrix<F>,
    labels_source: &[usize],
    logits_synth_target: &Matrix<F>,
    labels_synth_target: &[usize],
) -> Result<LogitLoss<F>> {
    let (a, ga) = mean_ce(logits_source, labels_source)?;
    let (b, gb) = mean_ce(logits_synth_target, labels_synth_target)?;
    Ok(LogitLoss {
        value: a + b,
        grads: vec![ga, gb],
    })
}

/// Soft-label cross-entropy of the kept rows, averaged over the kept count.
fn soft_ce<F: Real>(logits: &Matrix<F>, targets: &[(usize, &[F])]) -> (F, Matrix<F>) {
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    if targets.is_empty() {
        return (F::zero(), grad);
    }
    let inv = F::one() / F::from_usize(targets.len()).expect("count");
    let mut total = F::zero();
    for &(row, p) in targets {
        let z = logits.row(row);
        let logq = log_softmax_row(z);
        total -= p.iter().zip(&logq).map(|(&a, &b)| a * b).sum::<F>();
        let mass: F = p.iter().copied().sum();
        let g = grad.row_mut(row);
        for ((gz, q), &pz) in g.iter_mut().zip(softmax_row(z)).zip(p) {
            *gz = (mass * q - pz) * inv;
        }
    }
    (total * inv, grad)
}

/// EM loss over real targets and their synthetic-source translations. The
/// synthetic sample `m` shares the posterior of `real_target[partner[m]]`.
/// Returns exactly zero (and zero gradients) when nothing passes the mask.
pub fn em_from_logits<F: Real>(
    logits_target: &Matrix<F>,
    logits_synth_source: &Matrix<F>,
    partner: &[usize],
    posterior: &PosteriorBatch<F>,
) -> Result<LogitLoss<F>> {
    ensure!(
        posterior.probs.rows == logits_target.rows && posterior.mask.len() == logits_target.rows,
        Pairing,
        "posterior has {} rows for {} target samples",
        posterior.probs.rows,
        logits_target.rows
    );
    ensure!(
        partner.len() == logits_synth_source.rows,
        Pairing,
        "{} partner indices for {} synthetic-source samples",
        partner.len(),
        logits_synth_source.rows
    );
    if let Some(&bad) = partner.iter().find(|&&p| p >= logits_target.rows) {
        return Err(Error::Pairing(format!("partner index {bad} out of range")));
    }
    let kept_t: Vec<(usize, &[F])> = (0..logits_target.rows)
        .filter(|&i| posterior.mask[i])
        .map(|i| (i, posterior.probs.row(i)))
        .collect();
    let kept_s: Vec<(usize, &[F])> = partner
        .iter()
        .enumerate()
        .filter(|(_, &p)| posterior.mask[p])
        .map(|(m, &p)| (m, posterior.probs.row(p)))
        .collect();
    let (a, ga) = soft_ce(logits_target, &kept_t);
    let (b, gb) = soft_ce(logits_synth_source, &kept_s);
    Ok(LogitLoss {
        value: a + b,
        grads: vec![ga, gb],
    })
}

fn as_real<F: Real>(items: &[BatchItem]) -> Vec<Tensor3<F>> {
    items.iter().map(|b| b.pixels.cast()).collect()
}

fn labels_of(items: &[BatchItem], what: &str) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|b| {
            b.label
                .ok_or_else(|| Error::InvalidArgument(format!("{what} sample {} has no label", b.pair_id)))
        })
        .collect()
}

/// Network-level form of the supervised term.
pub fn supervised_ce_loss<F: Real>(
    net: &Network<F>,
    x_source: &[Tensor3<F>],
    x_synth_target: &[Tensor3<F>],
    labels: &[usize],
) -> Result<F> {
    ensure!(
        x_source.len() == labels.len() && x_synth_target.len() == labels.len(),
        Pairing,
        "source, synthetic-target and label counts differ"
    );
    let a = net.forward(x_source)?;
    let b = net.forward(x_synth_target)?;
    Ok(ce_from_logits(&a, labels, &b, labels)?.value)
}

/// Network-level form of the EM term; `x_synth_source[i]` pairs `x_target[i]`.
pub fn em_loss<F: Real>(
    net: &Network<F>,
    x_target: &[Tensor3<F>],
    x_synth_source: &[Tensor3<F>],
    posterior: &PosteriorBatch<F>,
) -> Result<F> {
    ensure!(
        x_target.len() == x_synth_source.len(),
        Pairing,
        "{} targets but {} synthetic sources",
        x_target.len(),
        x_synth_source.len()
    );
    let partner: Vec<usize> = (0..x_target.len()).collect();
    let a = net.forward(x_target)?;
    let b = net.forward(x_synth_source)?;
    Ok(em_from_logits(&a, &b, &partner, posterior)?.value)
}

/// `ce + em + β·at`.
pub fn full_objective(ce: f64, em: f64, at: f64, beta: f64) -> Result<f64> {
    ensure!(beta >= 0.0, InvalidArgument, "beta must be nonnegative, got {beta}");
    Ok(ce + em + beta * at)
}

// ---------------------------------------------------------------------------
// Objective with gradient

/// Coefficients of the three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub ce: f64,
    pub em: f64,
    pub at: f64,
}

impl TermWeights {
    pub fn full(beta: f64) -> Self {
        Self {
            ce: 1.0,
            em: 1.0,
            at: beta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveParts<F> {
    pub ce: F,
    pub em: F,
    pub at: F,
    pub total: F,
    pub kept_fraction: f64,
    pub grad: Vec<F>,
}

/// Evaluate the weighted objective on `batch` and its gradient with respect to
/// the target network's parameters. The target network sees the streams
/// concatenated as `[real_source, synth_target, real_target, synth_source]`.
pub fn objective_with_grad<F: Real>(
    target: &Network<F>,
    source: &Network<F>,
    batch: &Batch,
    posterior: &PosteriorBatch<F>,
    weights: TermWeights,
    flags: &TrainFlags,
) -> Result<ObjectiveParts<F>> {
    ensure!(weights.at >= 0.0, InvalidArgument, "beta must be nonnegative");
    let [n_rs, n_st, n_rt, n_ss] = batch.counts();
    let mut inputs = Vec::with_capacity(batch.len());
    for stream in [&batch.real_source, &batch.synth_target, &batch.real_target, &batch.synth_source] {
        inputs.extend(as_real::<F>(stream));
    }
    let fwd = target.forward_with_taps(&inputs)?;
    let k = target.spec().num_classes;
    let offsets = [0, n_rs, n_rs + n_st, n_rs + n_st + n_rt];
    let block = |s: usize, n: usize| fwd.logits.select_rows(&(s..s + n).collect::<Vec<_>>());

    let labels_rs = labels_of(&batch.real_source, "real source")?;
    let labels_st = labels_of(&batch.synth_target, "synthetic target")?;
    let ce = ce_from_logits(&block(offsets[0], n_rs), &labels_rs, &block(offsets[1], n_st), &labels_st)?;
    let em = em_from_logits(
        &block(offsets[2], n_rt),
        &block(offsets[3], n_ss),
        &batch.synth_source_partner,
        posterior,
    )?;

    let mut dlogits = Matrix::zeros(fwd.batch_len(), k);
    let place = |dl: &mut Matrix<F>, g: &Matrix<F>, offset: usize, w: F| {
        for i in 0..g.rows {
            for (d, &v) in dl.row_mut(offset + i).iter_mut().zip(g.row(i)) {
                *d += w * v;
            }
        }
    };
    let (wce, wem, wat) = (F::lit(weights.ce), F::lit(weights.em), F::lit(weights.at));
    place(&mut dlogits, &ce.grads[0], offsets[0], wce);
    place(&mut dlogits, &ce.grads[1], offsets[1], wce);
    place(&mut dlogits, &em.grads[0], offsets[2], wem);
    place(&mut dlogits, &em.grads[1], offsets[3], wem);

    let mut at = F::zero();
    let mut tap_grads = TapGrads::new();
    if flags.use_at {
        let layout = AlignmentLayout::from_batch(batch)?;
        if !layout.is_empty() {
            let mut src_inputs = as_real::<F>(&batch.real_source);
            src_inputs.extend(as_real::<F>(&batch.synth_source));
            let src = source.forward_with_taps(&src_inputs)?;
            let align = attention_alignment_loss(&src.taps, &fwd.taps, &layout, flags.mode, &flags.layers, flags.measure)?;
            at = align.value;
            if weights.at > 0.0 {
                tap_grads = align.target_grads;
                tap_grads.scale(wat);
            }
        }
    }

    let grad = target.backward(&fwd, &dlogits, &tap_grads)?;
    Ok(ObjectiveParts {
        ce: ce.value,
        em: em.value,
        at,
        total: wce * ce.value + wem * em.value + wat * at,
        kept_fraction: posterior.kept_fraction(),
        grad,
    })
}

// ---------------------------------------------------------------------------
// Training state and loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncEvent {
    pub step: u64,
    pub lr_reset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub ce: f64,
    pub em: f64,
    pub at: f64,
    pub kept_fraction: f64,
    pub lr: f64,
    pub sync_event: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_eval_acc: Option<f64>,
    pub wall_clock_s: f64,
}

/// Everything that evolves during adaptation. The source network is frozen.
#[derive(Debug, Clone)]
pub struct TrainerState<F> {
    pub step: u64,
    pub target: Network<F>,
    pub posterior_net: Network<F>,
    source: Network<F>,
    source_hash: String,
    optimizer: Adam<F>,
    schedule: ScheduleState,
    last_sync: u64,
}

impl<F: Real> TrainerState<F> {
    /// Target and posterior networks both start from the source snapshot.
    pub fn from_source(spec: ConvNetSpec, source: &ParamsSnapshot<F>, config: &EmConfig) -> Result<Self> {
        config.validate()?;
        let source_net = Network::from_snapshot(spec, source)?;
        Ok(Self {
            step: 0,
            target: source_net.clone(),
            posterior_net: source_net.clone(),
            source_hash: source.content_hash(),
            optimizer: Adam::new(source_net.num_params()),
            schedule: ScheduleState::new(config.lr_schedule.clone()),
            last_sync: 0,
            source: source_net,
        })
    }

    pub fn source(&self) -> &Network<F> {
        &self.source
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn learning_rate(&self) -> f64 {
        self.schedule.current()
    }

    pub fn schedule_progress(&self) -> u64 {
        self.schedule.progress
    }

    pub fn last_sync(&self) -> u64 {
        self.last_sync
    }

    pub fn set_exec(&mut self, exec: crate::par::Exec) {
        self.target.exec = exec;
        self.posterior_net.exec = exec;
        self.source.exec = exec;
    }
}

/// Sync the posterior network every `sync_period` steps (including step 0)
/// and optionally restart the learning-rate schedule.
pub fn maybe_sync_posterior<F: Real>(state: &mut TrainerState<F>, config: &EmConfig) -> Result<Option<SyncEvent>> {
    if !state.step.is_multiple_of(config.sync_period) {
        return Ok(None);
    }
    state.posterior_net.sync_params(&state.target.snapshot())?;
    state.last_sync = state.step;
    if config.reset_lr_on_sync {
        state.schedule.reset();
    }
    Ok(Some(SyncEvent {
        step: state.step,
        lr_reset: config.reset_lr_on_sync,
    }))
}

/// One optimization step using a given posterior batch. Does not sync.
pub fn step_with_posterior<F: Real>(
    state: &mut TrainerState<F>,
    batch: &Batch,
    posterior: &PosteriorBatch<F>,
    config: &EmConfig,
    flags: &TrainFlags,
) -> Result<ObjectiveParts<F>> {
    let parts = objective_with_grad(
        &state.target,
        &state.source,
        batch,
        posterior,
        TermWeights::full(config.beta),
        flags,
    )?;
    let lr = state.schedule.current();
    state.optimizer.step(state.target.params_mut(), &parts.grad, lr);
    state.schedule.advance();
    state.step += 1;
    Ok(parts)
}

pub fn train_step<F: Real>(
    state: &mut TrainerState<F>,
    batch: &Batch,
    config: &EmConfig,
    flags: &TrainFlags,
) -> Result<MetricsRecord> {
    let started = Instant::now();
    let sync = maybe_sync_posterior(state, config)?;
    let lr = state.schedule.current();
    let x_t = as_real::<F>(&batch.real_target);
    let mut posterior = estimate_posterior(&state.posterior_net, &x_t, config.threshold_at(state.step), state.last_sync)?;
    if !flags.use_filter {
        posterior = posterior.unfiltered();
    }
    let step = state.step;
    let parts = step_with_posterior(state, batch, &posterior, config, flags)?;
    Ok(MetricsRecord {
        step,
        ce: parts.ce.to_f64_lossy(),
        em: parts.em.to_f64_lossy(),
        at: parts.at.to_f64_lossy(),
        kept_fraction: parts.kept_fraction,
        lr,
        sync_event: sync.is_some(),
        eval_acc: None,
        source_eval_acc: None,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub target_acc: f64,
    pub source_acc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainingOutcome<F> {
    pub network: Network<F>,
    pub metrics: Vec<MetricsRecord>,
    pub syncs: Vec<SyncEvent>,
}

pub struct RunSettings<'a> {
    pub comp: &'a BatchComposition,
    pub config: &'a EmConfig,
    pub flags: &'a TrainFlags,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub exec: crate::par::Exec,
}

/// Adapt a target network initialized from the source snapshot. `evaluate`
/// runs every `eval_every` steps and after the last step; it is the only
/// place target labels may be consulted.
pub fn run_training<F: Real>(
    spec: &ConvNetSpec,
    source_snapshot: Option<&ParamsSnapshot<F>>,
    streams: &DomainStreams,
    settings: &RunSettings<'_>,
    mut evaluate: Option<&mut dyn FnMut(&Network<F>) -> Result<EvalResult>>,
) -> Result<TrainingOutcome<F>> {
    let snapshot = source_snapshot
        .ok_or_else(|| Error::InvalidArgument("adaptation needs a trained source snapshot".into()))?;
    let mut state = TrainerState::from_source(spec.clone(), snapshot, settings.config)?;
    state.set_exec(settings.exec);
    let mut metrics = Vec::with_capacity(settings.steps as usize);
    let mut syncs = Vec::new();
    for step in 0..settings.steps {
        let batch = compose_batch(streams, settings.comp, settings.seed, step)?;
        let mut rec = train_step(&mut state, &batch, settings.config, settings.flags)?;
        if rec.sync_event {
            syncs.push(SyncEvent {
                step,
                lr_reset: settings.config.reset_lr_on_sync,
            });
        }
        let due = settings.eval_every > 0 && (step + 1) % settings.eval_every == 0;
        if let Some(eval) = evaluate.as_mut() {
            if due || step + 1 == settings.steps {
                let r = eval(&state.target)?;
                rec.eval_acc = Some(r.target_acc);
                rec.source_eval_acc = r.source_acc;
            }
        }
        metrics.push(rec);
    }
    if state.source.snapshot().content_hash() != state.source_hash {
        return Err(Error::InvalidArgument("source network changed during adaptation".into()));
    }
    Ok(TrainingOutcome {
        network: state.target,
        metrics,
        syncs,
    })
}

/// Plain cross-entropy training on a labeled dataset (the source phase).
pub fn train_supervised<F: Real>(
    net: &mut Network<F>,
    data: &Dataset,
    steps: u64,
    batch_size: usize,
    schedule: &LrSchedule,
    seed: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    ensure!(data.is_labeled(), InvalidArgument, "supervised training needs labels");
    ensure!(batch_size > 0, InvalidArgument, "batch_size must be positive");
    let mut opt = Adam::new(net.num_params());
    let sched = ScheduleState::new(schedule.clone());
    let mut sched = sched;
    let labels = data.labels().expect("checked labeled");
    for step in 0..steps {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(crate::datagen::mix_seed(seed, step));
        let idx: Vec<usize> = if batch_size <= data.len() {
            rand::seq::index::sample(&mut rng, data.len(), batch_size).into_vec()
        } else {
            use rand::Rng;
            (0..batch_size).map(|_| rng.random_range(0..data.len())).collect()
        };
        let x: Vec<Tensor3<F>> = idx.iter().map(|&i| data.samples[i].pixels.cast()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let fwd = net.forward_with_taps(&x)?;
        let (loss, dl) = mean_ce(&fwd.logits, &y)?;
        let grad = net.backward(&fwd, &dl, &TapGrads::new())?;
        opt.step(net.params_mut(), &grad, sched.current());
        sched.advance();
        on_step(step, loss.to_f64_lossy());
    }
    Ok(())
}
