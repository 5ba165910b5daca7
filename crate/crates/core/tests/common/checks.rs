//! Measurements shared by the test targets and the acceptance runner. Each
//! returns the quantity compared against a tolerance.

use std::collections::HashMap;

use attalign::attention::{
    attention_alignment_loss, attention_alignment_loss_with_bandwidths, AlignmentLayout, AttentionMode, Measure,
};
use attalign::em_trainer::{
    estimate_posterior, maybe_sync_posterior, objective_with_grad, step_with_posterior, train_step, EmConfig,
    ObjectiveParts, PosteriorBatch, TermWeights, TrainFlags, TrainerState,
};
use attalign::model::{Network, TapGrads};
use attalign::optim::{Adam, LrSchedule};
use attalign::tensor::{Matrix, Tensor3};

use super::*;

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;

pub fn flags(measure: Measure, mode: AttentionMode, use_at: bool) -> TrainFlags {
    TrainFlags {
        use_at,
        use_filter: true,
        measure,
        mode,
        layers: vec![0, 1, 2],
    }
}

/// Soft posteriors from an unrelated network, with the first row masked.
pub fn soft_posterior(rows: usize, seed: u64) -> PosteriorBatch<f64> {
    let post_net = mini_net(seed);
    let s = streams(1);
    let xs: Vec<Tensor3<f64>> = s.target.samples.iter().take(rows).map(|x| x.pixels.cast()).collect();
    let mut p = estimate_posterior(&post_net, &xs, 0.0, 0).unwrap();
    p.mask[0] = false;
    p
}

/// Max relative error between the analytic gradient of the weighted
/// objective and central differences.
pub fn objective_grad_error(weights: TermWeights, measure: Measure, mode: AttentionMode, seed: u64) -> f64 {
    let s = streams(seed);
    let b = batch(&s, 20, seed);
    let target = mini_net(3 + seed);
    let source = mini_net(4 + seed);
    let posterior = soft_posterior(b.real_target.len(), 9 + seed);
    let f = flags(measure, mode, weights.at > 0.0);
    let run = |net: &Network<f64>| -> ObjectiveParts<f64> {
        objective_with_grad(net, &source, &b, &posterior, weights, &f).unwrap()
    };
    let analytic = run(&target).grad;
    assert!(analytic.iter().any(|g| g.abs() > 1e-8), "gradient vanished");
    let numeric = numeric_grad(&target, FD_STEP, |n| run(n).total);
    max_rel_err(&analytic, &numeric, FD_FLOOR)
}

/// Same for MMD or JMMD used as the alignment loss. Median-heuristic
/// bandwidths are constants in the analytic gradient, so the finite
/// differences hold them at their unperturbed values.
pub fn mmd_grad_error(measure: Measure) -> f64 {
    let s = streams(3);
    let b = batch(&s, 20, 2);
    let target = mini_net(7);
    let source = mini_net(8);
    let layout = AlignmentLayout::from_batch(&b).unwrap();
    let mut tin: Vec<Tensor3<f64>> = Vec::new();
    for stream in [&b.real_source, &b.synth_target, &b.real_target, &b.synth_source] {
        tin.extend(stream.iter().map(|x| x.pixels.cast()));
    }
    let mut sin: Vec<Tensor3<f64>> = b.real_source.iter().map(|x| x.pixels.cast()).collect();
    sin.extend(b.synth_source.iter().map(|x| x.pixels.cast()));
    let src = source.forward_with_taps(&sin).unwrap();
    let layers = [1, 2];
    let fwd = target.forward_with_taps(&tin).unwrap();
    let loss = attention_alignment_loss(&src.taps, &fwd.taps, &layout, AttentionMode::SumSq, &layers, measure).unwrap();
    assert!(loss.value > 0.0);
    let dlogits = Matrix::zeros(fwd.batch_len(), K);
    let analytic = target.backward(&fwd, &dlogits, &loss.target_grads).unwrap();
    let numeric = numeric_grad(&target, FD_STEP, |n| {
        let f = n.forward_with_taps(&tin).unwrap();
        attention_alignment_loss_with_bandwidths(&src.taps, &f.taps, &layout, AttentionMode::SumSq, &layers, measure, &loss.bandwidths)
            .unwrap()
            .value
    });
    max_rel_err(&analytic, &numeric, FD_FLOOR)
}

/// Runs three full steps and reports whether the source and posterior
/// networks kept every bit while the target moved.
pub fn frozen_networks_untouched() -> bool {
    let s = streams(4);
    let source = mini_net(10);
    let config = EmConfig {
        sync_period: 1000,
        p_t: 0.0001,
        p_t_initial: 0.0001,
        ..Default::default()
    };
    let mut state = TrainerState::from_source(mini_spec(), &source.snapshot(), &config).unwrap();
    state.target.params_mut().iter_mut().for_each(|p| *p *= 1.01);
    let src_before = state.source().params().to_vec();
    let post_before = state.posterior_net.params().to_vec();
    let target_before = state.target.params().to_vec();
    let f = flags(Measure::L2, AttentionMode::SumSq, true);
    for step in 0..3 {
        let b = batch(&s, 20, step);
        let xs: Vec<Tensor3<f64>> = b.real_target.iter().map(|x| x.pixels.cast()).collect();
        let posterior = estimate_posterior(&state.posterior_net, &xs, 0.0001, 0).unwrap();
        let parts = step_with_posterior(&mut state, &b, &posterior, &config, &f).unwrap();
        assert_eq!(parts.grad.len(), state.target.num_params());
        assert!(parts.em > 0.0 && parts.at > 0.0);
    }
    state.source().params() == &src_before[..]
        && state.posterior_net.params() == &post_before[..]
        && state.target.params() != &target_before[..]
}

/// Mean cross-entropy gradient of one stream, written out longhand.
fn stream_ce_grad(logits: &[Vec<f64>], labels: &[usize]) -> Vec<Vec<f64>> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter()
                .enumerate()
                .map(|(c, v)| (v / s - if c == y { 1.0 } else { 0.0 }) / n)
                .collect()
        })
        .collect()
}

/// Largest parameter difference between an EM step fed the true target
/// labels as one-hot posteriors (filter off, no alignment) and a plain
/// supervised step on all four streams.
pub fn one_hot_step_diff() -> f64 {
    let s = streams(21);
    let b = batch(&s, 20, 3);
    let source = mini_net(2);
    let lr = 0.001;
    let config = EmConfig {
        sync_period: 1000,
        p_t: 0.5,
        p_t_initial: 0.5,
        beta: 0.0,
        lr_schedule: LrSchedule::Constant { lr },
        reset_lr_on_sync: false,
    };
    let mut f = flags(Measure::L2, AttentionMode::SumSq, false);
    f.use_filter = false;

    let truth: HashMap<u64, usize> = s
        .labeled_target_for_eval()
        .samples
        .iter()
        .map(|x| (x.pair_id, x.label.unwrap()))
        .collect();
    let rt_labels: Vec<usize> = b.real_target.iter().map(|x| truth[&x.pair_id]).collect();
    let ss_labels: Vec<usize> = b.synth_source_partner.iter().map(|&p| rt_labels[p]).collect();
    let one_hot = Matrix::from_rows(
        &rt_labels
            .iter()
            .map(|&y| (0..K).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>(),
    );
    let posterior = PosteriorBatch {
        probs: one_hot,
        mask: vec![false; rt_labels.len()],
        source_step: 0,
    }
    .unfiltered();

    let mut state = TrainerState::from_source(mini_spec(), &source.snapshot(), &config).unwrap();
    step_with_posterior(&mut state, &b, &posterior, &config, &f).unwrap();

    let mut reference: Network<f64> = source.clone();
    let streams_and_labels = [
        (&b.real_source, b.real_source.iter().map(|x| x.label.unwrap()).collect::<Vec<_>>()),
        (&b.synth_target, b.synth_target.iter().map(|x| x.label.unwrap()).collect()),
        (&b.real_target, rt_labels.clone()),
        (&b.synth_source, ss_labels),
    ];
    let inputs: Vec<Tensor3<f64>> = streams_and_labels
        .iter()
        .flat_map(|(items, _)| items.iter().map(|x| x.pixels.cast()))
        .collect();
    let fwd = reference.forward_with_taps(&inputs).unwrap();
    let mut dl_rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0;
    for (items, labels) in &streams_and_labels {
        let z: Vec<Vec<f64>> = (offset..offset + items.len()).map(|i| fwd.logits.row(i).to_vec()).collect();
        dl_rows.extend(stream_ce_grad(&z, labels));
        offset += items.len();
    }
    let grad = reference.backward(&fwd, &Matrix::from_rows(&dl_rows), &TapGrads::new()).unwrap();
    let mut adam = Adam::new(reference.num_params());
    adam.step(reference.params_mut(), &grad, lr);

    state
        .target
        .params()
        .iter()
        .zip(reference.params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Number of steps at which the posterior network differed from the target
/// snapshot taken at the start of its N-step window.
pub fn posterior_window_violations() -> usize {
    let s = streams(22);
    let source = mini_net(3);
    let n = 3;
    let config = EmConfig {
        sync_period: n,
        p_t: 0.4,
        p_t_initial: 1.0,
        beta: 0.5,
        lr_schedule: LrSchedule::Constant { lr: 0.01 },
        reset_lr_on_sync: true,
    };
    let flags = TrainFlags::default();
    let mut state = TrainerState::from_source(mini_spec(), &source.snapshot(), &config).unwrap();
    let mut window_start = Vec::new();
    let mut violations = 0;
    for step in 0..(3 * n) {
        if step % n == 0 {
            window_start = state.target.params().to_vec();
        }
        let rec = train_step(&mut state, &batch(&s, 20, step), &config, &flags).unwrap();
        if rec.sync_event != (step % n == 0)
            || state.posterior_net.params() != &window_start[..]
            || state.last_sync() != step - step % n
        {
            violations += 1;
        }
    }
    if maybe_sync_posterior(&mut state, &config).unwrap().is_none() || state.posterior_net.params() != state.target.params() {
        violations += 1;
    }
    violations
}
