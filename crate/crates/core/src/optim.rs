//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![F::zero(); num_params],
            v: vec![F::zero(); num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = F::lit(lr * bc2.sqrt() / bc1);
        let eps = F::lit(self.eps * bc2.sqrt());
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr0 · gamma^⌊progress / decay_steps⌋`
    StepDecay {
        lr0: f64,
        gamma: f64,
        decay_steps: u64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay {
            lr0: 0.001,
            gamma: 0.5,
            decay_steps: 1000,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, progress: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay {
                lr0,
                gamma,
                decay_steps,
            } => lr0 * gamma.powi((progress / decay_steps.max(1)) as i32),
        }
    }
}

/// Schedule plus its progress counter; `reset` restarts the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub schedule: LrSchedule,
    pub progress: u64,
}

impl ScheduleState {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            progress: 0,
        }
    }

    pub fn current(&self) -> f64 {
        self.schedule.rate(self.progress)
    }

    pub fn advance(&mut self) {
        self.progress += 1;
    }

    pub fn reset(&mut self) {
        self.progress = 0;
    }
}
