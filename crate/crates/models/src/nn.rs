//! Layers and block recipes shared by every network.
//!
//! Feature maps are `N × C × H × W`.

use candle_core::{Tensor, D};

use crate::error::{ModelError, Result};
use crate::params::{Init, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: ps.get(&format!("{name}.weight"), &[output, input], Init::fan_in(input))?,
            bias: ps.get(&format!("{name}.bias"), &[output], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        Ok(Conv2d {
            weight: ps.get(
                &format!("{name}.weight"),
                &[output, input, kernel, kernel],
                Init::fan_in(fan_in),
            )?,
            bias: ps.get(&format!("{name}.bias"), &[output], Init::Zeros)?,
            stride,
            padding,
        })
    }

    /// `k×k` convolution that preserves spatial size (odd `k`).
    pub fn same(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
    ) -> Result<Self> {
        Conv2d::new(ps, name, input, output, kernel, 1, kernel / 2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.bias.dim(0)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log σ(x)`, stable for large `|x|`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    // log σ(x) = -(relu(-x) + log(1 + exp(-|x|)))
    let soft = ((x.abs()?.neg()?.exp()? + 1.0)?.log()? + x.neg()?.relu()?)?;
    Ok(soft.neg()?)
}

/// Row-stochastic `out × inp` matrix of 1-D linear interpolation weights
/// (half-pixel centers, edge clamped).
fn interpolation_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize to `height × width` as two interpolation matmuls, so it is
/// differentiable end to end.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let mw = Tensor::from_vec(interpolation_matrix(w, width), (width, w), dev)?.to_dtype(dtype)?;
    let mh = Tensor::from_vec(interpolation_matrix(h, height), (height, h), dev)?.to_dtype(dtype)?;
    // (N,C,H,W)·(W,W') → (N,C,H,W')
    let y = x.broadcast_matmul(&mw.t()?)?;
    // (H',H)·(N,C,H,W') → (N,C,H',W')
    let y = mh.broadcast_matmul(&y)?;
    Ok(y)
}

/// Replicates `(N, d)` vectors to `(N, d, h, w)` maps.
pub fn spatial_tile(v: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, d) = v.dims2()?;
    Ok(v
        .reshape((n, d, 1, 1))?
        .broadcast_as((n, d, height, width))?
        .contiguous()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Down,
    Up,
    Residual,
}

impl std::str::FromStr for BlockKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(BlockKind::Down),
            "up" => Ok(BlockKind::Up),
            "residual" => Ok(BlockKind::Residual),
            other => Err(ModelError::UnknownBlock(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Leaky,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => Ok(x.relu()?),
            Activation::Leaky => leaky_relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub input: usize,
    pub output: usize,
    pub norm: bool,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn new(input: usize, output: usize) -> Self {
        BlockConfig {
            input,
            output,
            norm: true,
            activation: Activation::Relu,
        }
    }

    pub fn leaky(mut self) -> Self {
        self.activation = Activation::Leaky;
        self
    }

    pub fn without_norm(mut self) -> Self {
        self.norm = false;
        self
    }
}

/// Down: stride-2 conv → norm → activation.
/// Up: bilinear ×2 → conv → norm → activation.
/// Residual: `x + norm(conv(act(norm(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct Block {
    kind: BlockKind,
    config: BlockConfig,
    conv1: Conv2d,
    conv2: Option<Conv2d>,
}

pub fn build_block(
    ps: &mut ParamStore,
    name: &str,
    kind: BlockKind,
    config: BlockConfig,
) -> Result<Block> {
    let (conv1, conv2) = match kind {
        BlockKind::Down => (
            Conv2d::new(ps, &format!("{name}.conv"), config.input, config.output, 3, 2, 1)?,
            None,
        ),
        BlockKind::Up => (
            Conv2d::same(ps, &format!("{name}.conv"), config.input, config.output, 3)?,
            None,
        ),
        BlockKind::Residual => {
            if config.input != config.output {
                return Err(ModelError::input("residual block needs input == output channels"));
            }
            (
                Conv2d::same(ps, &format!("{name}.conv1"), config.input, config.output, 3)?,
                Some(Conv2d::same(ps, &format!("{name}.conv2"), config.output, config.output, 3)?),
            )
        }
    };
    Ok(Block {
        kind,
        config,
        conv1,
        conv2,
    })
}

/// [`build_block`] with the kind given by name (`down`, `up`, `residual`).
pub fn build_block_named(
    ps: &mut ParamStore,
    name: &str,
    kind: &str,
    config: BlockConfig,
) -> Result<Block> {
    build_block(ps, name, kind.parse()?, config)
}

impl Block {
    fn norm(&self, x: Tensor) -> Result<Tensor> {
        if self.config.norm {
            instance_norm(&x)
        } else {
            Ok(x)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let act = self.config.activation;
        match self.kind {
            BlockKind::Down => act.apply(&self.norm(self.conv1.forward(x)?)?),
            BlockKind::Up => {
                let (_, _, h, w) = x.dims4()?;
                let up = resize_bilinear(x, 2 * h, 2 * w)?;
                act.apply(&self.norm(self.conv1.forward(&up)?)?)
            }
            BlockKind::Residual => {
                let y = act.apply(&self.norm(self.conv1.forward(x)?)?)?;
                let conv2 = self.conv2.as_ref().expect("residual block has two convs");
                let y = self.norm(conv2.forward(&y)?)?;
                Ok((x + y)?)
            }
        }
    }
}

/// LSTM cell over `(N, input)` vectors; gate order `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    gates: Linear,
    hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            gates: Linear::new(ps, &format!("{name}.gates"), input + hidden, 4 * hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.gates.forward(&Tensor::cat(&[x, h], 1)?)?;
        let n = self.hidden;
        let i = sigmoid(&z.narrow(1, 0, n)?)?;
        let f = sigmoid(&z.narrow(1, n, n)?)?;
        let g = z.narrow(1, 2 * n, n)?.tanh()?;
        let o = sigmoid(&z.narrow(1, 3 * n, n)?)?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }
}

/// Convolutional LSTM cell over `(N, C, H, W)` maps.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    gates: Conv2d,
    hidden: usize,
}

impl ConvLstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(ConvLstmCell {
            gates: Conv2d::same(ps, &format!("{name}.gates"), input + hidden, 4 * hidden, 3)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.gates.forward(&Tensor::cat(&[x, h], 1)?)?;
        let n = self.hidden;
        let i = sigmoid(&z.narrow(1, 0, n)?)?;
        let f = sigmoid(&z.narrow(1, n, n)?)?;
        let g = z.narrow(1, 2 * n, n)?.tanh()?;
        let o = sigmoid(&z.narrow(1, 3 * n, n)?)?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }
}

/// Keeps `new` where `mask` (shape broadcastable, values 0/1) is 1 and `old`
/// elsewhere.
pub fn masked_update(mask: &Tensor, new: &Tensor, old: &Tensor) -> Result<Tensor> {
    let keep = mask.broadcast_mul(new)?;
    let hold = (mask.ones_like()? - mask)?.broadcast_mul(old)?;
    Ok((keep + hold)?)
}
