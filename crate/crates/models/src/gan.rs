//! Adversarial value functions and weighted stage objectives.
//!
//! Scalar helpers take discriminator probabilities in `(0, 1)`; tensor
//! helpers take logits and use `log σ` for stability.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::log_sigmoid;

fn check(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(ModelError::ScoreRange(p))
    }
}

/// `log d_real + log(1 − d_fake)`.
pub fn instance_adv_value(d_real: f64, d_fake: f64) -> Result<f64> {
    Ok(check(d_real)?.ln() + (1.0 - check(d_fake)?).ln())
}

/// Same two-term value on aggregated scene inputs.
pub fn global_adv_value(d_real: f64, d_fake: f64) -> Result<f64> {
    instance_adv_value(d_real, d_fake)
}

/// Mean of per-instance values.
pub fn aggregate_instances(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(ModelError::input("no instances to aggregate"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `log D(matched) + log(1 − D(mismatched)) + log(1 − D(fake))`.
pub fn image_adv_value(matched: f64, mismatched: f64, fake: f64) -> Result<f64> {
    Ok(check(matched)?.ln() + (1.0 - check(mismatched)?).ln() + (1.0 - check(fake)?).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeLossWeights {
    pub instance: f64,
    pub global: f64,
    pub reconstruction: f64,
}

impl Default for ShapeLossWeights {
    fn default() -> Self {
        ShapeLossWeights {
            instance: 1.0,
            global: 1.0,
            reconstruction: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageLossWeights {
    pub adversarial: f64,
    pub reconstruction: f64,
}

impl Default for ImageLossWeights {
    fn default() -> Self {
        ImageLossWeights {
            adversarial: 1.0,
            reconstruction: 10.0,
        }
    }
}

/// `λ_i L_inst + λ_g L_global + λ_r L_rec`.
pub fn shape_total_loss(inst: f64, global: f64, rec: f64, w: ShapeLossWeights) -> f64 {
    w.instance * inst + w.global * global + w.reconstruction * rec
}

/// `λ_a L_adv + λ_r L_rec`.
pub fn image_total_loss(adv: f64, rec: f64, w: ImageLossWeights) -> f64 {
    w.adversarial * adv + w.reconstruction * rec
}

/// Per-element `−log σ(x)`: the loss for logits that should read "real".
pub fn real_loss(logits: &Tensor) -> Result<Tensor> {
    Ok(log_sigmoid(logits)?.neg()?)
}

/// Per-element `−log(1 − σ(x))`: the loss for logits that should read "fake".
pub fn fake_loss(logits: &Tensor) -> Result<Tensor> {
    Ok(log_sigmoid(&logits.neg()?)?.neg()?)
}
