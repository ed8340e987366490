//! Per-stage optimizer settings and learning-rate schedules.

use hiergen_models::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Box,
    Shape,
    Image,
    Extractor,
}

impl StageId {
    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Box => "box",
            StageId::Shape => "shape",
            StageId::Image => "image",
            StageId::Extractor => "extractor",
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StageId {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(StageId::Box),
            "shape" => Ok(StageId::Shape),
            "image" => Ok(StageId::Image),
            "extractor" => Ok(StageId::Extractor),
            other => Err(TrainError::config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Decay {
    Constant,
    /// `lr · rate^(epoch − after_epoch)` once past `after_epoch`.
    Exponential { rate: f64, after_epoch: usize },
    /// Linear from `lr` at `after_epoch` to 0 at `end_epoch`.
    LinearToZero { after_epoch: usize, end_epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub stage: StageId,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub decay: Decay,
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn box_default() -> Self {
        OptimizerSpec {
            stage: StageId::Box,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: Decay::Exponential {
                rate: 0.5,
                after_epoch: 10,
            },
        }
    }

    pub fn shape_default() -> Self {
        OptimizerSpec {
            stage: StageId::Shape,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            decay: Decay::LinearToZero {
                after_epoch: 50,
                end_epoch: 100,
            },
        }
    }

    pub fn image_default() -> Self {
        OptimizerSpec {
            stage: StageId::Image,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            decay: Decay::LinearToZero {
                after_epoch: 30,
                end_epoch: 60,
            },
        }
    }

    pub fn extractor_default() -> Self {
        OptimizerSpec {
            stage: StageId::Extractor,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: Decay::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::config(format!("{} optimizer: {m}", self.stage)));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        match self.decay {
            Decay::Exponential { rate, .. } if !(rate > 0.0 && rate <= 1.0) => {
                bad("decay rate must lie in (0, 1]")
            }
            Decay::LinearToZero {
                after_epoch,
                end_epoch,
            } if end_epoch <= after_epoch => bad("end_epoch must exceed after_epoch"),
            _ => Ok(()),
        }
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: lr_at(self, epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Learning rate for 1-based `epoch`.
pub fn lr_at(spec: &OptimizerSpec, epoch: usize) -> f64 {
    match spec.decay {
        Decay::Constant => spec.lr,
        Decay::Exponential { rate, after_epoch } => {
            if epoch <= after_epoch {
                spec.lr
            } else {
                spec.lr * rate.powi((epoch - after_epoch) as i32)
            }
        }
        Decay::LinearToZero {
            after_epoch,
            end_epoch,
        } => {
            if epoch <= after_epoch {
                spec.lr
            } else if epoch >= end_epoch {
                0.0
            } else {
                spec.lr * (end_epoch - epoch) as f64 / (end_epoch - after_epoch) as f64
            }
        }
    }
}
