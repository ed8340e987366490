//! Shape generator: box tensors of every instance pass through a shared
//! encoder, a bidirectional convolutional LSTM over the instance sequence and
//! a per-instance decoder that emits one mask per box.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{
    build_block, masked_update, resize_bilinear, sigmoid, spatial_tile, Block, BlockConfig,
    BlockKind, Conv2d, ConvLstmCell, Linear,
};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeGenConfig {
    pub num_classes: usize,
    /// Side of the box-tensor and output mask grid.
    pub grid: usize,
    /// Spatial side of the recurrent core.
    pub core_res: usize,
    /// Side of the decoder output before resizing to `grid`.
    pub mask_res: usize,
    pub channels: usize,
    pub hidden: usize,
    pub noise_dim: usize,
    pub res_blocks: usize,
    /// Multiply decoded masks by the box occupancy at full resolution.
    pub output_masking: bool,
    pub bidirectional: bool,
}

impl Default for ShapeGenConfig {
    fn default() -> Self {
        ShapeGenConfig {
            num_classes: 6,
            grid: 64,
            core_res: 8,
            mask_res: 32,
            channels: 64,
            hidden: 64,
            noise_dim: 16,
            res_blocks: 1,
            output_masking: true,
            bidirectional: true,
        }
    }
}

fn halvings(from: usize, to: usize, what: &str) -> Result<usize> {
    if to == 0 || from < to || from % to != 0 || !(from / to).is_power_of_two() {
        return Err(ModelError::input(format!(
            "{what}: {from} must be a power-of-two multiple of {to}"
        )));
    }
    Ok((from / to).trailing_zeros() as usize)
}

impl ShapeGenConfig {
    pub fn validate(&self) -> Result<()> {
        halvings(self.grid, self.core_res, "grid vs core_res")?;
        halvings(self.mask_res, self.core_res, "mask_res vs core_res")?;
        if self.mask_res > self.grid {
            return Err(ModelError::input("mask_res must not exceed grid"));
        }
        if self.num_classes == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(ModelError::input("shape generator sizes must be positive"));
        }
        Ok(())
    }
}

/// A padded batch of scenes: `boxes` is `(N, T, L, G, G)`, `lengths[i] ≤ T`.
#[derive(Debug, Clone)]
pub struct InstanceBatch {
    pub boxes: Tensor,
    pub lengths: Vec<usize>,
}

impl InstanceBatch {
    /// Builds the padded tensor from per-scene lists of flat `L·G·G`
    /// channel-major box tensors.
    pub fn from_scenes(
        scenes: &[Vec<Vec<f32>>],
        num_classes: usize,
        grid: usize,
        dtype: DType,
    ) -> Result<Self> {
        let n = scenes.len();
        let t = scenes.iter().map(Vec::len).max().unwrap_or(0);
        if n == 0 || t == 0 {
            return Err(ModelError::input("batch needs at least one instance"));
        }
        let per = num_classes * grid * grid;
        let mut data = vec![0f32; n * t * per];
        for (i, scene) in scenes.iter().enumerate() {
            for (j, b) in scene.iter().enumerate() {
                if b.len() != per {
                    return Err(ModelError::input(format!(
                        "box tensor {i}/{j} has {} cells, expected {per}",
                        b.len()
                    )));
                }
                let off = (i * t + j) * per;
                data[off..off + per].copy_from_slice(b);
            }
        }
        let boxes = Tensor::from_vec(data, (n, t, num_classes, grid, grid), &Device::Cpu)?
            .to_dtype(dtype)?;
        Ok(InstanceBatch {
            boxes,
            lengths: scenes.iter().map(Vec::len).collect(),
        })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let (n, t, l, g, _) = self.boxes.dims5()?;
        Ok((n, t, l, g))
    }

    /// `(N, T)` indicator of real (non-padded) instances.
    pub fn live(&self) -> Result<Tensor> {
        let (n, t, _, _) = self.dims()?;
        let mut v = vec![0f64; n * t];
        for (i, &len) in self.lengths.iter().enumerate() {
            for j in 0..len {
                v[i * t + j] = 1.0;
            }
        }
        Ok(Tensor::from_vec(v, (n, t), self.boxes.device())?.to_dtype(self.boxes.dtype())?)
    }

    /// `(N, T, G, G)` union of each box tensor's channels.
    pub fn occupancy(&self) -> Result<Tensor> {
        Ok(self.boxes.max(2)?)
    }

    /// `(N, L, G, G)` pixel-wise maximum over each scene's box tensors.
    pub fn global_boxes(&self) -> Result<Tensor> {
        Ok(self.boxes.max(1)?)
    }
}

/// Occupancy `(M, 1, G, G)` max-pooled to `res`.
fn pool_to(occ: &Tensor, res: usize) -> Result<Tensor> {
    let (_, _, g, _) = occ.dims4()?;
    if g == res {
        return Ok(occ.clone());
    }
    Ok(occ.max_pool2d(g / res)?)
}

#[derive(Debug, Clone)]
pub struct ShapeGenerator {
    config: ShapeGenConfig,
    encoder: Vec<Block>,
    forward_cell: ConvLstmCell,
    backward_cell: Option<ConvLstmCell>,
    fuse: Conv2d,
    residual: Vec<Block>,
    ups: Vec<Block>,
    out: Conv2d,
}

impl ShapeGenerator {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: ShapeGenConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut encoder = Vec::new();
        let mut input = config.num_classes;
        for i in 0..halvings(config.grid, config.core_res, "grid")? {
            encoder.push(build_block(
                ps,
                &format!("{prefix}.enc{i}"),
                BlockKind::Down,
                BlockConfig::new(input, c),
            )?);
            input = c;
        }
        let forward_cell = ConvLstmCell::new(ps, &format!("{prefix}.core_fwd"), c, config.hidden)?;
        let backward_cell = if config.bidirectional {
            Some(ConvLstmCell::new(ps, &format!("{prefix}.core_bwd"), c, config.hidden)?)
        } else {
            None
        };
        let dirs = if config.bidirectional { 2 } else { 1 };
        let fuse = Conv2d::same(
            ps,
            &format!("{prefix}.fuse"),
            dirs * config.hidden + config.noise_dim,
            c,
            3,
        )?;
        let residual = (0..config.res_blocks)
            .map(|i| {
                build_block(
                    ps,
                    &format!("{prefix}.res{i}"),
                    BlockKind::Residual,
                    BlockConfig::new(c, c),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ups = (0..halvings(config.mask_res, config.core_res, "mask_res")?)
            .map(|i| {
                build_block(
                    ps,
                    &format!("{prefix}.up{i}"),
                    BlockKind::Up,
                    BlockConfig::new(c, c),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(ps, &format!("{prefix}.out"), c, 1, 1, 1, 0)?;
        Ok(ShapeGenerator {
            config,
            encoder,
            forward_cell,
            backward_cell,
            fuse,
            residual,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &ShapeGenConfig {
        &self.config
    }

    /// Runs the recurrent core over `(N, T, C, r, r)` encodings and returns the
    /// per-instance core features, `(N·T, dirs·hidden, r, r)`.
    fn core(&self, enc: &Tensor, live: &Tensor) -> Result<Tensor> {
        let (n, t, _, r, _) = enc.dims5()?;
        let hid = self.config.hidden;
        let zeros = Tensor::zeros((n, hid, r, r), enc.dtype(), enc.device())?;
        let run = |cell: &ConvLstmCell, order: Vec<usize>| -> Result<Vec<Tensor>> {
            let mut h = zeros.clone();
            let mut c = zeros.clone();
            let mut outs = vec![zeros.clone(); t];
            for j in order {
                let m = live.narrow(1, j, 1)?.reshape((n, 1, 1, 1))?;
                let x = enc.narrow(1, j, 1)?.squeeze(1)?;
                let (h2, c2) = cell.step(&x, &h, &c)?;
                h = masked_update(&m, &h2, &h)?;
                c = masked_update(&m, &c2, &c)?;
                outs[j] = h.clone();
            }
            Ok(outs)
        };
        let fwd = run(&self.forward_cell, (0..t).collect())?;
        let per_step: Vec<Tensor> = match &self.backward_cell {
            Some(cell) => {
                let bwd = run(cell, (0..t).rev().collect())?;
                fwd.iter()
                    .zip(&bwd)
                    .map(|(f, b)| Ok(Tensor::cat(&[f, b], 1)?))
                    .collect::<Result<_>>()?
            }
            None => fwd,
        };
        let stacked = Tensor::stack(&per_step, 1)?;
        let (_, _, ch, _, _) = stacked.dims5()?;
        Ok(stacked.reshape((n * t, ch, r, r))?)
    }

    /// Masks `(N, T, G, G)` for every instance; padded instances are zero.
    /// `noise` is `(N, T, noise_dim)`.
    pub fn generate_masks(&self, batch: &InstanceBatch, noise: &Tensor) -> Result<Tensor> {
        let (n, t, l, g) = batch.dims()?;
        if l != self.config.num_classes || g != self.config.grid {
            return Err(ModelError::input(format!(
                "box tensors are {l}×{g}×{g}, model expects {}×{g2}×{g2}",
                self.config.num_classes,
                g2 = self.config.grid
            )));
        }
        if noise.dims() != [n, t, self.config.noise_dim] {
            return Err(ModelError::input(format!(
                "noise has shape {:?}, expected {:?}",
                noise.dims(),
                [n, t, self.config.noise_dim]
            )));
        }
        let live = batch.live()?;
        let occ = batch.occupancy()?.reshape((n * t, 1, g, g))?;

        let mut x = batch.boxes.reshape((n * t, l, g, g))?;
        for b in &self.encoder {
            x = b.forward(&x)?;
        }
        let r = self.config.core_res;
        let c = self.config.channels;
        let core = self.core(&x.reshape((n, t, c, r, r))?, &live)?;

        let z = spatial_tile(&noise.reshape((n * t, self.config.noise_dim))?, r, r)?;
        let occ_r = pool_to(&occ, r)?;
        let mut h = Tensor::cat(&[&core, &z], 1)?.broadcast_mul(&occ_r)?;
        h = self.fuse.forward(&h)?;
        h = crate::nn::instance_norm(&h)?.relu()?.broadcast_mul(&occ_r)?;
        for b in &self.residual {
            h = b.forward(&h)?.broadcast_mul(&occ_r)?;
        }
        let mut res = r;
        for b in &self.ups {
            res *= 2;
            h = b.forward(&h)?.broadcast_mul(&pool_to(&occ, res)?)?;
        }
        let mut m = sigmoid(&self.out.forward(&h)?)?;
        m = resize_bilinear(&m, g, g)?;
        if self.config.output_masking {
            m = (m * &occ)?;
        }
        let m = m.reshape((n, t, g, g))?;
        Ok(m.broadcast_mul(&live.reshape((n, t, 1, 1))?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub channels: Vec<usize>,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            channels: vec![32, 64, 128, 128],
        }
    }
}

/// Convolutional critic over `(N, C, G, G)` inputs returning `(N,)` logits.
#[derive(Debug, Clone)]
pub struct ConvDiscriminator {
    input: usize,
    blocks: Vec<Block>,
    head: Linear,
}

impl ConvDiscriminator {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        input: usize,
        grid: usize,
        config: &DiscConfig,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut ch = input;
        let mut res = grid;
        for (i, &c) in config.channels.iter().enumerate() {
            if res < 2 {
                return Err(ModelError::input("discriminator has more down blocks than the grid allows"));
            }
            blocks.push(build_block(
                ps,
                &format!("{prefix}.down{i}"),
                BlockKind::Down,
                BlockConfig::new(ch, c).leaky(),
            )?);
            ch = c;
            res = res.div_ceil(2);
        }
        let head = Linear::new(ps, &format!("{prefix}.head"), ch * res * res, 1)?;
        Ok(ConvDiscriminator {
            input,
            blocks,
            head,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.input {
            return Err(ModelError::input(format!(
                "discriminator expects {} channels, got {c}",
                self.input
            )));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.features(x)?;
        Ok(self.head.forward(&h.flatten_from(1)?)?.squeeze(1)?)
    }
}

/// Instance-wise and global discriminators: identical architecture, separate
/// parameters, inputs of `L + 1` channels.
#[derive(Debug, Clone)]
pub struct ShapeDiscriminators {
    pub instance: ConvDiscriminator,
    pub global: ConvDiscriminator,
}

impl ShapeDiscriminators {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        num_classes: usize,
        grid: usize,
        config: &DiscConfig,
    ) -> Result<Self> {
        Ok(ShapeDiscriminators {
            instance: ConvDiscriminator::new(ps, &format!("{prefix}.inst"), num_classes + 1, grid, config)?,
            global: ConvDiscriminator::new(ps, &format!("{prefix}.global"), num_classes + 1, grid, config)?,
        })
    }
}

/// Depth-concatenates `(M, L, G, G)` boxes with `(M, G, G)` masks.
pub fn disc_input(boxes: &Tensor, masks: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[boxes, &masks.unsqueeze(1)?], 1)?)
}
