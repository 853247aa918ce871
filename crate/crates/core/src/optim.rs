//! Optimizers and learning-rate schedulers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Unknown keys are rejected by the flattened `kind` variant; serde cannot
/// combine `deny_unknown_fields` with `flatten` on this struct.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, kind: OptimizerKind::SgdMomentum { momentum } }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        }
    }

    /// SGD with momentum 0.9 at lr 0.001, used for the trained model.
    pub fn model_default() -> Self {
        Self::sgd(0.001, 0.9)
    }

    /// Adam at lr 0.0001, used for the gradient predictor.
    pub fn predictor_default() -> Self {
        Self::adam(0.0001)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => unit("momentum", momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if eps > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("eps must be positive, got {eps}")))
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Optimizer state, one slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, slots: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Updates `param` in place from `grad`, using the state stored under `slot`.
    ///
    /// SGD with momentum: `v = mu*v + g; p -= lr*v`.
    /// Adam: bias-corrected first and second moments.
    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        grad.check_shape(param.shape(), "optimizer gradient")?;
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Slot::default);
        }
        let s = &mut self.slots[slot];
        if s.first.is_empty() {
            s.first = vec![0.0; param.len()];
        } else if s.first.len() != param.len() {
            return Err(Error::shape(format!(
                "optimizer slot {slot} holds {} values, parameter has {}",
                s.first.len(),
                param.len()
            )));
        }
        s.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut s.first) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if s.second.is_empty() {
                    s.second = vec![0.0; param.len()];
                }
                let c1 = 1.0 - beta1.powi(s.steps as i32);
                let c2 = 1.0 - beta2.powi(s.steps as i32);
                for (((p, g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(&mut s.first)
                    .zip(&mut s.second)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        param.ensure_finite("optimizer update")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedulerConfig {
    /// Keep the initial learning rate.
    Constant,
    /// Multiply by `factor` once the metric fails to improve (relative threshold
    /// 1e-4) for more than `patience` consecutive epochs.
    ReduceOnPlateau { patience: u32, factor: f64 },
    /// Multiply by `gamma` when the epoch counter reaches each milestone.
    MultiStep { milestones: Vec<u32>, gamma: f64 },
}

impl LrSchedulerConfig {
    /// Library defaults of the usual plateau scheduler: patience 10, factor 0.1.
    pub fn plateau_default() -> Self {
        LrSchedulerConfig::ReduceOnPlateau { patience: 10, factor: 0.1 }
    }

    pub fn multistep_default() -> Self {
        LrSchedulerConfig::MultiStep { milestones: vec![10, 15], gamma: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let f = match self {
            LrSchedulerConfig::Constant => return Ok(()),
            LrSchedulerConfig::ReduceOnPlateau { factor, .. } => *factor,
            LrSchedulerConfig::MultiStep { gamma, .. } => *gamma,
        };
        if f > 0.0 && f <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("scheduler factor must lie in (0, 1], got {f}")))
        }
    }
}

const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct LrScheduler {
    config: LrSchedulerConfig,
    lr: f64,
    epoch: u32,
    best: Option<f64>,
    bad_epochs: u32,
}

impl LrScheduler {
    pub fn new(config: LrSchedulerConfig, initial_lr: f64) -> Self {
        Self { config, lr: initial_lr, epoch: 0, best: None, bad_epochs: 0 }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Advances one epoch. `metric` (lower is better) is only read by the plateau
    /// policy. Returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        self.epoch += 1;
        match &self.config {
            LrSchedulerConfig::Constant => {}
            LrSchedulerConfig::MultiStep { milestones, gamma } => {
                let hits = milestones.iter().filter(|&&m| m == self.epoch).count();
                for _ in 0..hits {
                    self.lr *= gamma;
                }
            }
            LrSchedulerConfig::ReduceOnPlateau { patience, factor } => {
                let improved = match self.best {
                    None => true,
                    Some(best) => metric < best * (1.0 - PLATEAU_THRESHOLD),
                };
                if improved {
                    self.best = Some(metric);
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                }
                if self.bad_epochs > *patience {
                    self.lr *= factor;
                    self.bad_epochs = 0;
                }
            }
        }
        self.lr
    }
}
