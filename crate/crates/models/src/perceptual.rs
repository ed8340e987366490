//! Small fixed CNN used both as the perceptual feature extractor and, with
//! its classification head, as the evaluation classifier.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{build_block, Block, BlockConfig, BlockKind, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Output channels of each down block.
    pub channels: Vec<usize>,
    /// Include the raw input as a zeroth feature layer.
    pub identity_stage: bool,
    pub num_classes: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            channels: vec![16, 32, 64, 64],
            identity_stage: true,
            num_classes: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    blocks: Vec<Block>,
    head: Linear,
}

impl FeatureExtractor {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: ExtractorConfig) -> Result<Self> {
        if config.channels.is_empty() {
            return Err(ModelError::input("extractor needs at least one stage"));
        }
        let mut blocks = Vec::new();
        let mut input = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            blocks.push(build_block(
                ps,
                &format!("{prefix}.down{i}"),
                BlockKind::Down,
                BlockConfig::new(input, c).leaky().without_norm(),
            )?);
            input = c;
        }
        let head = Linear::new(ps, &format!("{prefix}.head"), input, config.num_classes)?;
        Ok(FeatureExtractor {
            config,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Feature layers `Φ_l` for a `(N, 3, H, W)` batch.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(ModelError::input(format!("extractor expects 3 channels, got {c}")));
        }
        let mut out = Vec::with_capacity(self.blocks.len() + 1);
        if self.config.identity_stage {
            out.push(x.clone());
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Class logits `(N, C)` from globally pooled final features.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(x)?, D::Minus1)?)
    }
}

/// Repeats a single-channel batch to three channels.
pub fn replicate_channels(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 1 {
        return Err(ModelError::input(format!("expected 1 channel, got {c}")));
    }
    Ok(Tensor::cat(&[x, x, x], 1)?)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(ModelError::input(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-example `Σ_l mean|Φ_l(a) − Φ_l(b)|`, shape `(N,)`.
pub fn perceptual_distance_per_example(
    a: &Tensor,
    b: &Tensor,
    extractor: &FeatureExtractor,
) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let (a, b) = if a.dim(1)? == 1 {
        (replicate_channels(a)?, replicate_channels(b)?)
    } else {
        (a.clone(), b.clone())
    };
    let fa = extractor.features(&a)?;
    let fb = extractor.features(&b)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (x - y)?.abs()?.flatten_from(1)?.mean(1)?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    Ok(total.expect("extractor has at least one layer"))
}

/// Batch mean of [`perceptual_distance_per_example`].
pub fn perceptual_distance(a: &Tensor, b: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    Ok(perceptual_distance_per_example(a, b, extractor)?.mean(0)?)
}

/// Per-example mean absolute difference, shape `(N,)`.
pub fn l1_distance_per_example(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    Ok((a - b)?.abs()?.flatten_from(1)?.mean(1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    #[default]
    Perceptual,
    L1,
}

/// Reconstruction distance per example under the chosen loss.
pub fn reconstruction_per_example(
    kind: ReconstructionLoss,
    a: &Tensor,
    b: &Tensor,
    extractor: &FeatureExtractor,
) -> Result<Tensor> {
    match kind {
        ReconstructionLoss::Perceptual => perceptual_distance_per_example(a, b, extractor),
        ReconstructionLoss::L1 => l1_distance_per_example(a, b),
    }
}
