//! Equivalences against independently written reference computations.

mod common;

use attalign::em_trainer::{train_step, EmConfig, TrainFlags, TrainerState};
use common::checks::*;
use common::*;

#[test]
fn one_hot_em_step_equals_supervised_step() {
    let diff = one_hot_step_diff();
    assert!(diff <= 1e-7, "parameter diff {diff}");
}

#[test]
fn posterior_constant_within_windows() {
    assert_eq!(posterior_window_violations(), 0);
}

/// Two identical states fed identical batches end bit-identical.
#[test]
fn train_step_is_deterministic() {
    let s = streams(23);
    let source = mini_net(4);
    let config = EmConfig {
        sync_period: 2,
        p_t: 0.3,
        ..Default::default()
    };
    let flags = TrainFlags::default();
    let run = || {
        let mut st = TrainerState::<f64>::from_source(mini_spec(), &source.snapshot(), &config).unwrap();
        for step in 0..4 {
            train_step(&mut st, &batch(&s, 20, step), &config, &flags).unwrap();
        }
        st.target.snapshot().content_hash()
    };
    assert_eq!(run(), run());
}
