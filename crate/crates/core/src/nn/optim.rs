use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "optimizer.weight_decay",
                "must be finite and nonnegative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `lr(t) = lr0 · (1 + cos(π · t / T)) / 2`, held at zero past `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        CosineSchedule { base_lr, total_steps }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// SGD with (Nesterov) momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: OptimizerConfig,
    pub schedule: CosineSchedule,
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl Sgd {
    pub fn new(config: OptimizerConfig, schedule: CosineSchedule, parameter_count: usize) -> Self {
        Sgd {
            config,
            schedule,
            velocity: vec![0.0; parameter_count],
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One update at the scheduled learning rate, then advances the step counter.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient shape must match the parameters");
        assert_eq!(
            params.len(),
            self.velocity.len(),
            "optimizer state shape must match the parameters"
        );
        let lr = self.current_lr();
        let OptimizerConfig {
            momentum,
            nesterov,
            weight_decay,
            ..
        } = self.config;
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            let update = if nesterov { g + momentum * *v } else { *v };
            *p -= lr * update;
        }
        self.step += 1;
    }
}
