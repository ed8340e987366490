//! Autoregressive box generator: an LSTM decoder with a categorical class
//! head and two bivariate Gaussian mixture heads, `p(x, y | l)` followed by
//! `p(w, h | l, x, y)`.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};
use hiergen_core::{BoxSpec, LayoutSequence};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{Linear, LstmCell};
use crate::params::ParamStore;

/// Correlations are clamped to `±RHO_LIMIT` before use.
pub const RHO_LIMIT: f64 = 0.99999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxGenConfig {
    pub num_classes: usize,
    pub hidden: usize,
    /// Mixture components per head.
    pub components: usize,
    pub text_dim: usize,
    pub t_max: usize,
    /// Grid of the downstream rasterization; sampled sizes are floored at
    /// one cell.
    pub grid: usize,
}

impl Default for BoxGenConfig {
    fn default() -> Self {
        BoxGenConfig {
            num_classes: 6,
            hidden: 128,
            components: 5,
            text_dim: 128,
            t_max: 20,
            grid: 64,
        }
    }
}

impl BoxGenConfig {
    /// Width of the decoder's per-step input `[x, y, w, h, onehot(L+1)]`.
    pub fn step_input_dim(&self) -> usize {
        4 + self.num_classes + 1
    }

    /// Index of the end-of-sequence class.
    pub fn terminator(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NllWeights {
    pub label: f64,
    pub boxes: f64,
    /// Count the terminator step in the class term.
    pub include_terminal: bool,
}

impl Default for NllWeights {
    fn default() -> Self {
        NllWeights {
            label: 4.0,
            boxes: 1.0,
            include_terminal: true,
        }
    }
}

/// One bivariate Gaussian mixture with decoded parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub scales: Vec<[f64; 2]>,
    pub corr: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MixtureParams {
    /// Decodes `6K` raw head outputs laid out as
    /// `[π logits | μx | μy | log σx | log σy | ρ pre-tanh]`.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() || raw.len() % 6 != 0 {
            return Err(ModelError::input(format!(
                "mixture head has {} outputs, expected a positive multiple of 6",
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("mixture head"));
        }
        let k = raw.len() / 6;
        let part = |i: usize| &raw[i * k..(i + 1) * k];
        let lse = log_sum_exp(part(0));
        Ok(MixtureParams {
            weights: part(0).iter().map(|l| (l - lse).exp()).collect(),
            means: (0..k).map(|j| [part(1)[j], part(2)[j]]).collect(),
            scales: (0..k).map(|j| [part(3)[j].exp(), part(4)[j].exp()]).collect(),
            corr: part(5)
                .iter()
                .map(|r| r.tanh().clamp(-RHO_LIMIT, RHO_LIMIT))
                .collect(),
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.scales.len() != k || self.corr.len() != k {
            return Err(ModelError::input("inconsistent mixture component counts"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(ModelError::input(format!("mixture weights sum to {total}")));
        }
        if self.scales.iter().flatten().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(ModelError::input("mixture scales must be positive"));
        }
        if self.corr.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(ModelError::input("mixture correlations must lie in (-1, 1)"));
        }
        Ok(())
    }

    fn component_log_pdf(&self, j: usize, u: f64, v: f64) -> f64 {
        let [mx, my] = self.means[j];
        let [sx, sy] = self.scales[j];
        let r = self.corr[j].clamp(-RHO_LIMIT, RHO_LIMIT);
        let dx = (u - mx) / sx;
        let dy = (v - my) / sy;
        let om = 1.0 - r * r;
        let z = dx * dx + dy * dy - 2.0 * r * dx * dy;
        -(2.0 * PI).ln() - sx.ln() - sy.ln() - 0.5 * om.ln() - z / (2.0 * om)
    }

    /// `log Σ_k π_k N((u, v); μ_k, Σ_k)` evaluated with log-sum-exp.
    pub fn log_pdf(&self, u: f64, v: f64) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|j| self.weights[j].ln() + self.component_log_pdf(j, u, v))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let j = sample_categorical(&self.weights, rng);
        let [mx, my] = self.means[j];
        let [sx, sy] = self.scales[j];
        let r = self.corr[j];
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        (
            mx + sx * z1,
            my + sy * (r * z1 + (1.0 - r * r).sqrt() * z2),
        )
    }
}

/// Index drawn from unnormalized nonnegative `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Batched mixture log-density. `raw` is `(N, 6K)`, `u` and `v` are `(N,)`.
pub fn mixture_log_pdf(raw: &Tensor, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, width) = raw.dims2()?;
    if width == 0 || width % 6 != 0 {
        return Err(ModelError::input(format!("mixture head width {width}")));
    }
    let k = width / 6;
    let part = |i: usize| raw.narrow(1, i * k, k);
    let log_pi = candle_nn::ops::log_softmax(&part(0)?, D::Minus1)?;
    let (mx, my) = (part(1)?, part(2)?);
    let (lsx, lsy) = (part(3)?, part(4)?);
    let rho = part(5)?.tanh()?.clamp(-RHO_LIMIT, RHO_LIMIT)?;
    let dx = u.unsqueeze(1)?.broadcast_sub(&mx)?.div(&lsx.exp()?)?;
    let dy = v.unsqueeze(1)?.broadcast_sub(&my)?.div(&lsy.exp()?)?;
    let om = (rho.sqr()?.neg()? + 1.0)?;
    let z = ((dx.sqr()? + dy.sqr()?)? - ((&rho * &dx)? * &dy)?.affine(2.0, 0.0)?)?;
    let log_n = (((lsx + lsy)?.neg()? - (om.log()? * 0.5)?)? - z.div(&(om * 2.0)?)?)?;
    let log_n = (log_n - (2.0 * PI).ln())?;
    Ok((log_pi + log_n)?.log_sum_exp(1)?)
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone)]
pub struct BoxGenerator {
    config: BoxGenConfig,
    init: Linear,
    cell: LstmCell,
    class_head: Linear,
    xy_head: Linear,
    wh_head: Linear,
    dtype: DType,
}

/// Per-step teacher-forced negative log-likelihoods. Entries past an
/// example's sequence are zero.
#[derive(Debug, Clone)]
pub struct StepNll {
    /// `(N, S)` class NLL; step `T_i` holds the terminator term.
    pub class: Tensor,
    /// `(N, S)` coordinate NLL `−log p(x,y|l) − log p(w,h|l,x,y)`.
    pub coord: Tensor,
    pub lengths: Vec<usize>,
}

impl StepNll {
    /// Weighted per-example loss averaged over the batch.
    pub fn loss(&self, weights: NllWeights) -> Result<Tensor> {
        let (n, s) = self.class.dims2()?;
        let mut wc = vec![0f64; n * s];
        let mut wb = vec![0f64; n * s];
        for (i, &t) in self.lengths.iter().enumerate() {
            let class_steps = if weights.include_terminal { t + 1 } else { t };
            for j in 0..class_steps {
                wc[i * s + j] = weights.label / (class_steps as f64 * n as f64);
            }
            for j in 0..t {
                wb[i * s + j] = weights.boxes / (t as f64 * n as f64);
            }
        }
        let dev = self.class.device();
        let dtype = self.class.dtype();
        let wc = Tensor::from_vec(wc, (n, s), dev)?.to_dtype(dtype)?;
        let wb = Tensor::from_vec(wb, (n, s), dev)?.to_dtype(dtype)?;
        Ok(((&self.class * wc)?.sum_all()? + (&self.coord * wb)?.sum_all()?)?)
    }

    /// Summed class and coordinate NLL of every example (terminator
    /// included), as `(N,)` tensors.
    pub fn sums(&self) -> Result<(Tensor, Tensor)> {
        Ok((self.class.sum(1)?, self.coord.sum(1)?))
    }
}

/// Output of [`BoxGenerator::sample_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLayout {
    pub layout: LayoutSequence,
    /// The step limit was reached before the terminator was drawn.
    pub truncated: bool,
    /// Mixture components whose correlation hit the clamp.
    pub rho_clamped: usize,
    /// Mixture components evaluated.
    pub rho_total: usize,
}

/// `[x, y, w, h, onehot(L+1)]` for the previous box; `None` is START.
pub fn encode_step_input(prev: Option<&BoxSpec>, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; 4 + num_classes + 1];
    if let Some(b) = prev {
        v[0] = b.x;
        v[1] = b.y;
        v[2] = b.w;
        v[3] = b.h;
        v[4 + b.label] = 1.0;
    }
    v
}

fn clamp_sample(x: f64, y: f64, w: f64, h: f64, label: usize, grid: usize) -> BoxSpec {
    let min = 1.0 / grid.max(1) as f64;
    let w = w.clamp(min, 1.0);
    let h = h.clamp(min, 1.0);
    BoxSpec::new(x.clamp(0.0, 1.0 - w), y.clamp(0.0, 1.0 - h), w, h, label)
}

impl BoxGenerator {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: BoxGenConfig) -> Result<Self> {
        if config.num_classes == 0 || config.components == 0 {
            return Err(ModelError::input("box generator needs L ≥ 1 and K ≥ 1"));
        }
        let l1 = config.num_classes + 1;
        let h = config.hidden;
        let k6 = 6 * config.components;
        Ok(BoxGenerator {
            init: Linear::new(ps, &format!("{prefix}.init"), config.text_dim, 2 * h)?,
            cell: LstmCell::new(ps, &format!("{prefix}.lstm"), config.step_input_dim(), h)?,
            class_head: Linear::new(ps, &format!("{prefix}.class"), h, l1)?,
            xy_head: Linear::new(ps, &format!("{prefix}.xy"), h + l1, k6)?,
            wh_head: Linear::new(ps, &format!("{prefix}.wh"), h + l1 + 2, k6)?,
            dtype: ps.dtype(),
            config,
        })
    }

    pub fn config(&self) -> &BoxGenConfig {
        &self.config
    }

    fn tensor(&self, data: Vec<f64>, shape: impl Into<candle_core::Shape>) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// `(h_0, c_0)` from a linear projection of `s` through `tanh`.
    pub fn initial_state(&self, s: &Tensor) -> Result<DecoderState> {
        let z = self.init.forward(s)?.tanh()?;
        let hd = self.config.hidden;
        Ok(DecoderState {
            h: z.narrow(1, 0, hd)?,
            c: z.narrow(1, hd, hd)?,
        })
    }

    /// Advances the decoder by one box. `prev` is `(N, 4 + L + 1)`.
    pub fn step(&self, prev: &Tensor, state: &DecoderState) -> Result<DecoderState> {
        let (h, c) = self.cell.step(prev, &state.h, &state.c)?;
        Ok(DecoderState { h, c })
    }

    pub fn class_logits(&self, h: &Tensor) -> Result<Tensor> {
        self.class_head.forward(h)
    }

    /// Raw `(N, 6K)` xy mixture outputs given the class one-hot `(N, L+1)`.
    pub fn xy_raw(&self, h: &Tensor, onehot: &Tensor) -> Result<Tensor> {
        self.xy_head.forward(&Tensor::cat(&[h, onehot], 1)?)
    }

    /// Raw `(N, 6K)` wh mixture outputs given class one-hot and `(N, 2)` position.
    pub fn wh_raw(&self, h: &Tensor, onehot: &Tensor, xy: &Tensor) -> Result<Tensor> {
        self.wh_head.forward(&Tensor::cat(&[h, onehot, xy], 1)?)
    }

    /// Teacher-forced per-step NLL for a batch of ground-truth layouts.
    pub fn step_nll(&self, s: &Tensor, layouts: &[&LayoutSequence]) -> Result<StepNll> {
        let n = layouts.len();
        if n == 0 {
            return Err(ModelError::input("empty batch"));
        }
        if s.dim(0)? != n {
            return Err(ModelError::input("text batch and layout batch differ in size"));
        }
        let l = self.config.num_classes;
        let l1 = l + 1;
        for (i, lay) in layouts.iter().enumerate() {
            if lay.is_empty() {
                return Err(ModelError::input(format!("layout {i} has no boxes")));
            }
            for b in &lay.boxes {
                if b.label >= l {
                    return Err(ModelError::input(format!(
                        "layout {i} has label {} but the model has {l} classes",
                        b.label
                    )));
                }
            }
        }
        let lengths: Vec<usize> = layouts.iter().map(|l| l.len()).collect();
        let steps = lengths.iter().max().copied().unwrap_or(0) + 1;
        let width = self.config.step_input_dim();

        // Row (i, t) of every per-step table lives at i * steps + t.
        let mut inputs = vec![0f64; steps * n * width];
        let mut onehot = vec![0f64; n * steps * l1];
        let mut coords = vec![0f64; n * steps * 4];
        let mut class_live = vec![0f64; n * steps];
        let mut coord_live = vec![0f64; n * steps];
        for (i, lay) in layouts.iter().enumerate() {
            for t in 0..steps {
                let r = i * steps + t;
                if t > 0 && t <= lay.len() {
                    let enc = encode_step_input(Some(&lay.boxes[t - 1]), l);
                    let off = (t * n + i) * width;
                    inputs[off..off + width].copy_from_slice(&enc);
                }
                if t < lay.len() {
                    let b = &lay.boxes[t];
                    onehot[r * l1 + b.label] = 1.0;
                    coords[r * 4..r * 4 + 4].copy_from_slice(&[b.x, b.y, b.w, b.h]);
                    class_live[r] = 1.0;
                    coord_live[r] = 1.0;
                } else if t == lay.len() {
                    onehot[r * l1 + l] = 1.0;
                    class_live[r] = 1.0;
                }
            }
        }
        let inputs = self.tensor(inputs, (steps, n, width))?;
        let mut state = self.initial_state(s)?;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            state = self.step(&inputs.get(t)?, &state)?;
            hs.push(state.h.clone());
        }
        let h = Tensor::stack(&hs, 1)?.reshape((n * steps, self.config.hidden))?;
        let onehot = self.tensor(onehot, (n * steps, l1))?;
        let coords = self.tensor(coords, (n * steps, 4))?;
        let class_live = self.tensor(class_live, n * steps)?;
        let coord_live = self.tensor(coord_live, n * steps)?;

        let log_p = candle_nn::ops::log_softmax(&self.class_logits(&h)?, D::Minus1)?;
        let class_nll = (log_p * &onehot)?.sum(1)?.neg()?.mul(&class_live)?;

        let xy = coords.narrow(1, 0, 2)?;
        let col = |j: usize| -> Result<Tensor> { Ok(coords.narrow(1, j, 1)?.squeeze(1)?) };
        let lp_xy = mixture_log_pdf(&self.xy_raw(&h, &onehot)?, &col(0)?, &col(1)?)?;
        let lp_wh = mixture_log_pdf(&self.wh_raw(&h, &onehot, &xy)?, &col(2)?, &col(3)?)?;
        let coord_nll = (lp_xy + lp_wh)?.neg()?.mul(&coord_live)?;

        Ok(StepNll {
            class: class_nll.reshape((n, steps))?,
            coord: coord_nll.reshape((n, steps))?,
            lengths,
        })
    }

    /// `λ_l · mean class NLL + λ_b · mean coordinate NLL`, averaged over the batch.
    pub fn sequence_nll(
        &self,
        s: &Tensor,
        layouts: &[&LayoutSequence],
        weights: NllWeights,
    ) -> Result<Tensor> {
        self.step_nll(s, layouts)?.loss(weights)
    }

    /// Ancestral sampling for a single `(1, text_dim)` embedding.
    pub fn sample_layout<R: Rng + ?Sized>(
        &self,
        s: &Tensor,
        class_names: &[String],
        rng: &mut R,
        t_max: usize,
    ) -> Result<SampledLayout> {
        let l = self.config.num_classes;
        if class_names.len() != l {
            return Err(ModelError::input(format!(
                "{} class names for a model with {l} classes",
                class_names.len()
            )));
        }
        if s.dim(0)? != 1 {
            return Err(ModelError::input("sample_layout takes a single embedding"));
        }
        let to_vec = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        let mut state = self.initial_state(s)?;
        let mut prev: Option<BoxSpec> = None;
        let mut boxes = Vec::new();
        let mut truncated = true;
        let mut rho_clamped = 0;
        let mut rho_total = 0;
        let mut count_rho = |raw: &[f64]| {
            let k = raw.len() / 6;
            for r in &raw[5 * k..] {
                rho_total += 1;
                if r.tanh().abs() >= RHO_LIMIT {
                    rho_clamped += 1;
                }
            }
        };
        for _ in 0..t_max {
            let input = self.tensor(encode_step_input(prev.as_ref(), l), (1, l + 4 + 1))?;
            state = self.step(&input, &state)?;
            let logits = to_vec(&self.class_logits(&state.h)?)?;
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("class logits"));
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let label = sample_categorical(&probs, rng);
            if label == l {
                truncated = false;
                break;
            }
            let mut oh = vec![0.0; l + 1];
            oh[label] = 1.0;
            let oh = self.tensor(oh, (1, l + 1))?;
            let raw_xy = to_vec(&self.xy_raw(&state.h, &oh)?)?;
            count_rho(&raw_xy);
            let (x, y) = MixtureParams::from_raw(&raw_xy)?.sample(rng);
            let (x, y) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
            let xy = self.tensor(vec![x, y], (1, 2))?;
            let raw_wh = to_vec(&self.wh_raw(&state.h, &oh, &xy)?)?;
            count_rho(&raw_wh);
            let (w, h) = MixtureParams::from_raw(&raw_wh)?.sample(rng);
            let b = clamp_sample(x, y, w, h, label, self.config.grid);
            boxes.push(b);
            prev = Some(b);
        }
        Ok(SampledLayout {
            layout: LayoutSequence::new(class_names.to_vec(), boxes),
            truncated,
            rho_clamped,
            rho_total,
        })
    }
}
