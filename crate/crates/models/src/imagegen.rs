//! Image generator conditioned on a semantic label map and the text
//! embedding, and its layout- and text-aware discriminator.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{
    build_block, instance_norm, leaky_relu, resize_bilinear, sigmoid, spatial_tile, Block,
    BlockConfig, BlockKind, Conv2d, Linear,
};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageGenConfig {
    pub num_classes: usize,
    pub grid: usize,
    pub text_dim: usize,
    /// Stem width at full resolution.
    pub channels: usize,
    /// Depth `d` of the layout feature.
    pub feature_dim: usize,
    /// Spatial side `h = w` of the layout feature.
    pub feature_res: usize,
    pub background_dim: usize,
    pub noise_dim: usize,
    pub res_blocks: usize,
    /// Gate the layout feature with the text; off concatenates it directly.
    pub attention: bool,
}

impl Default for ImageGenConfig {
    fn default() -> Self {
        ImageGenConfig {
            num_classes: 6,
            grid: 64,
            text_dim: 128,
            channels: 32,
            feature_dim: 256,
            feature_res: 8,
            background_dim: 64,
            noise_dim: 64,
            res_blocks: 2,
            attention: true,
        }
    }
}

fn halvings(from: usize, to: usize) -> Result<usize> {
    if to == 0 || from < to || from % to != 0 || !(from / to).is_power_of_two() {
        return Err(ModelError::input(format!(
            "{from} must be a power-of-two multiple of {to}"
        )));
    }
    Ok((from / to).trailing_zeros() as usize)
}

#[derive(Debug, Clone)]
pub struct ImageGenerator {
    config: ImageGenConfig,
    stem: Conv2d,
    downs: Vec<Block>,
    gate: Linear,
    background: Linear,
    fuse: Conv2d,
    residual: Vec<Block>,
    ups: Vec<Block>,
    out: Conv2d,
}

impl ImageGenerator {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: ImageGenConfig) -> Result<Self> {
        let levels = halvings(config.grid, config.feature_res)?;
        let l = config.num_classes;
        let d = config.feature_dim;
        let stem = Conv2d::same(ps, &format!("{prefix}.stem"), l, config.channels, 3)?;
        let mut downs = Vec::new();
        let mut ch = config.channels;
        for i in 0..levels {
            let next = if i + 1 == levels { d } else { (ch * 2).min(d) };
            downs.push(build_block(
                ps,
                &format!("{prefix}.down{i}"),
                BlockKind::Down,
                BlockConfig::new(ch, next),
            )?);
            ch = next;
        }
        if levels == 0 {
            return Err(ModelError::input("image generator needs feature_res < grid"));
        }
        let gate = Linear::new(ps, &format!("{prefix}.gate"), config.text_dim, d)?;
        let background = Linear::new(ps, &format!("{prefix}.background"), config.text_dim, config.background_dim)?;
        let fuse = Conv2d::same(
            ps,
            &format!("{prefix}.fuse"),
            d + config.background_dim + config.noise_dim,
            d,
            3,
        )?;
        let residual = (0..config.res_blocks)
            .map(|i| {
                build_block(ps, &format!("{prefix}.res{i}"), BlockKind::Residual, BlockConfig::new(d, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        let mut ch = d;
        for i in 0..levels {
            let next = (ch / 2).max(config.channels);
            ups.push(build_block(
                ps,
                &format!("{prefix}.up{i}"),
                BlockKind::Up,
                BlockConfig::new(ch + l, next),
            )?);
            ch = next;
        }
        let out = Conv2d::same(ps, &format!("{prefix}.out"), ch + l, 3, 3)?;
        Ok(ImageGenerator {
            config,
            stem,
            downs,
            gate,
            background,
            fuse,
            residual,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &ImageGenConfig {
        &self.config
    }

    /// Number of places the label map is re-injected: every upsampling stage
    /// plus the output convolution.
    pub fn side_inputs(&self) -> usize {
        self.ups.len() + 1
    }

    /// Layout feature `A`, `(N, d, h, w)`.
    pub fn encode_layout(&self, m: &Tensor) -> Result<Tensor> {
        let mut x = instance_norm(&self.stem.forward(m)?)?.relu()?;
        for b in &self.downs {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    /// The text projection `W_g s` whose spatial replication gates `A`.
    pub fn gate_projection(&self, s: &Tensor) -> Result<Tensor> {
        self.gate.forward(s)
    }

    /// `A ⊙ σ(S)` with `S` the text projection tiled to `A`'s spatial size.
    pub fn gate_layout(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        gate_with(a, &self.gate_projection(s)?)
    }

    pub fn generate(&self, m: &Tensor, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.forward(m, s, z, None)
    }

    /// [`Self::generate`] with the label-map side input of one decoder stage
    /// replaced by zeros; `stage` ranges over `0..side_inputs()`.
    pub fn generate_with_side_input_zeroed(
        &self,
        m: &Tensor,
        s: &Tensor,
        z: &Tensor,
        stage: usize,
    ) -> Result<Tensor> {
        if stage >= self.side_inputs() {
            return Err(ModelError::input(format!("no decoder stage {stage}")));
        }
        self.forward(m, s, z, Some(stage))
    }

    fn forward(&self, m: &Tensor, s: &Tensor, z: &Tensor, zeroed: Option<usize>) -> Result<Tensor> {
        let (n, l, g, g2) = m.dims4()?;
        let cfg = &self.config;
        if l != cfg.num_classes || g != cfg.grid || g2 != cfg.grid {
            return Err(ModelError::input(format!(
                "label map {l}×{g}×{g2} does not match {}×{g3}×{g3}",
                cfg.num_classes,
                g3 = cfg.grid
            )));
        }
        if s.dims() != [n, cfg.text_dim] || z.dims() != [n, cfg.noise_dim] {
            return Err(ModelError::input("text or noise batch has the wrong shape"));
        }
        let a = self.encode_layout(m)?;
        let r = cfg.feature_res;
        let a = if cfg.attention { self.gate_layout(&a, s)? } else { a };
        let bg = spatial_tile(&self.background.forward(s)?, r, r)?;
        let zt = spatial_tile(z, r, r)?;
        let mut x = Tensor::cat(&[&a, &bg, &zt], 1)?;
        x = instance_norm(&self.fuse.forward(&x)?)?.relu()?;
        for b in &self.residual {
            x = b.forward(&x)?;
        }
        let side = |stage: usize, res: usize| -> Result<Tensor> {
            let mr = resize_bilinear(m, res, res)?;
            if zeroed == Some(stage) {
                Ok(mr.zeros_like()?)
            } else {
                Ok(mr)
            }
        };
        let mut res = r;
        for (i, b) in self.ups.iter().enumerate() {
            x = b.forward(&Tensor::cat(&[&x, &side(i, res)?], 1)?)?;
            res *= 2;
        }
        let last = self.ups.len();
        let x = self.out.forward(&Tensor::cat(&[&x, &side(last, res)?], 1)?)?;
        Ok(x.tanh()?)
    }
}

/// `a ⊙ σ(tile(proj))` for `a: (N, d, h, w)` and `proj: (N, d)`.
pub fn gate_with(a: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let (n, d, h, w) = a.dims4()?;
    if proj.dims() != [n, d] {
        return Err(ModelError::input(format!(
            "gate projection {:?} does not match layout feature ({n}, {d})",
            proj.dims()
        )));
    }
    Ok((a * sigmoid(&spatial_tile(proj, h, w)?)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageDiscConfig {
    pub channels: usize,
    pub max_channels: usize,
    /// Side of the final feature map before text fusion.
    pub final_res: usize,
    pub text_proj: usize,
}

impl Default for ImageDiscConfig {
    fn default() -> Self {
        ImageDiscConfig {
            channels: 32,
            max_channels: 256,
            final_res: 4,
            text_proj: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageDiscriminator {
    num_classes: usize,
    text_dim: usize,
    blocks: Vec<Block>,
    text: Linear,
    fuse: Conv2d,
    head: Linear,
}

impl ImageDiscriminator {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        num_classes: usize,
        grid: usize,
        text_dim: usize,
        config: &ImageDiscConfig,
    ) -> Result<Self> {
        let levels = halvings(grid, config.final_res)?;
        let mut blocks = Vec::new();
        let mut ch = 3 + num_classes;
        let mut next = config.channels;
        for i in 0..levels {
            blocks.push(build_block(
                ps,
                &format!("{prefix}.down{i}"),
                BlockKind::Down,
                BlockConfig::new(ch, next).leaky(),
            )?);
            ch = next;
            next = (next * 2).min(config.max_channels);
        }
        let text = Linear::new(ps, &format!("{prefix}.text"), text_dim, config.text_proj)?;
        let fuse = Conv2d::new(ps, &format!("{prefix}.fuse"), ch + config.text_proj, ch, 1, 1, 0)?;
        let r = config.final_res;
        let head = Linear::new(ps, &format!("{prefix}.head"), ch * r * r, 1)?;
        Ok(ImageDiscriminator {
            num_classes,
            text_dim,
            blocks,
            text,
            fuse,
            head,
        })
    }

    /// Logits `(N,)` for label map `m`, text `s` and image `x`.
    pub fn logits(&self, m: &Tensor, s: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (n, l, g, _) = m.dims4()?;
        let (nx, c, gx, _) = x.dims4()?;
        if l != self.num_classes || c != 3 || nx != n || gx != g || s.dims() != [n, self.text_dim] {
            return Err(ModelError::input(format!(
                "discriminator inputs misaligned: M {:?}, X {:?}, s {:?}",
                m.dims(),
                x.dims(),
                s.dims()
            )));
        }
        let mut h = Tensor::cat(&[x, m], 1)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let (_, _, r, _) = h.dims4()?;
        let t = spatial_tile(&self.text.forward(s)?, r, r)?;
        let h = leaky_relu(&self.fuse.forward(&Tensor::cat(&[&h, &t], 1)?)?)?;
        Ok(self.head.forward(&h.flatten_from(1)?)?.squeeze(1)?)
    }

    /// Scores in `(0, 1)`.
    pub fn score(&self, m: &Tensor, s: &Tensor, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(m, s, x)?)
    }
}
