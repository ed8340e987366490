//! Per-stage training loops.
//!
//! Every trainer owns its stage and optimizers, draws all randomness from
//! one seeded stream, and can be checkpointed and resumed between epochs.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use hiergen_core::BoxSpec;
use hiergen_models::gan::{fake_loss, real_loss};
use hiergen_models::perceptual::reconstruction_per_example;
use hiergen_models::shapegen::disc_input;
use hiergen_models::{Adam, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    BoxStageConfig, ExtractorStageConfig, ImageStageConfig, LayoutSource, ShapeStageConfig,
};
use crate::data::{crop_objects, minibatches, normal_tensor, SceneSet};
use crate::error::{Result, TrainError};
use crate::schedule::{lr_at, OptimizerSpec, StageId};
use crate::stages::{
    optimizer_states, restore_optimizer, BoxStage, ExtractorStage, ImageStage, Progress,
    ShapeStage, DTYPE,
};

/// Losses and step counts of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean of every logged loss component.
    pub losses: BTreeMap<String, f64>,
    pub d_steps: usize,
    pub g_steps: usize,
}

#[derive(Default)]
struct Accumulator {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl Accumulator {
    fn add(&mut self, values: &[(&str, f64)]) {
        for (k, v) in values {
            *self.sums.entry(k.to_string()).or_insert(0.0) += v;
        }
        self.count += 1;
    }

    fn means(self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.into_iter().map(|(k, v)| (k, v / n)).collect()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn guard(stage: &'static str, epoch: usize, values: &[(&str, f64)]) -> Result<()> {
    for (k, v) in values {
        if !v.is_finite() {
            return Err(TrainError::Diverged {
                stage,
                epoch,
                what: k.to_string(),
            });
        }
    }
    Ok(())
}

/// Training rng for `stage`, or the one saved in `progress`.
fn stage_rng(seed: u64, stage: StageId, progress: &Progress) -> ChaCha8Rng {
    progress.rng.clone().unwrap_or_else(|| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(100 + stage as u64);
        r
    })
}

fn make_adam(
    ps: &ParamStore,
    prefixes: &[&str],
    spec: &OptimizerSpec,
    name: &str,
    progress: &Progress,
) -> Result<Adam> {
    let params: Vec<_> = prefixes
        .iter()
        .flat_map(|p| ps.vars_with_prefix(&format!("{p}.")))
        .collect();
    let mut opt = Adam::new(params, spec.adam(progress.epoch.max(1)))?;
    if progress.optimizers.contains_key(name) {
        restore_optimizer(&mut opt, name, &progress.optimizers)?;
    }
    Ok(opt)
}

/// Jointly trains the text encoder and box generator on teacher-forced NLL.
pub struct BoxTrainer {
    pub stage: BoxStage,
    config: BoxStageConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    digest: String,
}

impl BoxTrainer {
    pub fn new(stage: BoxStage, config: &BoxStageConfig, seed: u64, progress: Progress) -> Result<Self> {
        let opt = make_adam(
            &stage.ps,
            &[BoxStage::TEXT_PREFIX, BoxStage::MODEL_PREFIX],
            &config.optimizer,
            "box",
            &progress,
        )?;
        Ok(BoxTrainer {
            rng: stage_rng(seed, StageId::Box, &progress),
            stage,
            config: config.clone(),
            opt,
            epoch: progress.epoch,
            digest: progress.config_digest,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch,
            config_digest: self.digest.clone(),
            optimizers: optimizer_states(&[("box", &self.opt)]),
            rng: Some(self.rng.clone()),
        }
    }

    pub fn run_epoch(&mut self, data: &SceneSet) -> Result<EpochLog> {
        self.epoch += 1;
        let lr = lr_at(&self.config.optimizer, self.epoch);
        self.opt.set_lr(lr);
        let mut acc = Accumulator::default();
        let mut steps = 0;
        for idx in minibatches(data.len(), self.config.batch_size, &mut self.rng) {
            let s = self.stage.encode_ids(&data.tokens(&idx))?;
            let loss = self
                .stage
                .generator
                .sequence_nll(&s, &data.layouts(&idx), self.config.loss)?;
            let v = scalar(&loss)?;
            guard("box", self.epoch, &[("nll", v)])?;
            self.opt.step(&loss.backward()?)?;
            acc.add(&[("nll", v)]);
            steps += 1;
        }
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            losses: acc.means(),
            d_steps: 0,
            g_steps: steps,
        })
    }
}

/// Every object crop of `data` with its class, as `(crops, labels)`.
pub fn object_crops(data: &SceneSet, crop: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut items: Vec<(Tensor, BoxSpec)> = Vec::new();
    let mut labels = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let images = data.images(chunk, DTYPE)?;
        for (k, &i) in chunk.iter().enumerate() {
            let img = images.get(k)?;
            for b in &data.scenes[i].layout.boxes {
                items.push((img.clone(), *b));
                labels.push(b.label);
            }
        }
    }
    if items.is_empty() {
        return Err(TrainError::config("no objects to crop"));
    }
    Ok((crop_objects(&items, crop)?, labels))
}

fn onehot(labels: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Trains the feature extractor as an object-crop classifier.
pub struct ExtractorTrainer {
    pub stage: ExtractorStage,
    config: ExtractorStageConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    digest: String,
}

impl ExtractorTrainer {
    pub fn new(
        stage: ExtractorStage,
        config: &ExtractorStageConfig,
        seed: u64,
        progress: Progress,
    ) -> Result<Self> {
        let opt = make_adam(&stage.ps, &[ExtractorStage::PREFIX], &config.optimizer, "extractor", &progress)?;
        Ok(ExtractorTrainer {
            rng: stage_rng(seed, StageId::Extractor, &progress),
            stage,
            config: config.clone(),
            opt,
            epoch: progress.epoch,
            digest: progress.config_digest,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch,
            config_digest: self.digest.clone(),
            optimizers: optimizer_states(&[("extractor", &self.opt)]),
            rng: Some(self.rng.clone()),
        }
    }

    /// One epoch over precomputed `(crops, labels)`.
    pub fn run_epoch(&mut self, crops: &Tensor, labels: &[usize]) -> Result<EpochLog> {
        self.epoch += 1;
        let lr = lr_at(&self.config.optimizer, self.epoch);
        self.opt.set_lr(lr);
        let classes = self.stage.net.config().num_classes;
        let mut acc = Accumulator::default();
        let mut steps = 0;
        for idx in minibatches(labels.len(), self.config.batch_size, &mut self.rng) {
            let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
            let x = crops.index_select(&ids, 0)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logp = candle_nn::ops::log_softmax(&self.stage.net.logits(&x)?, D::Minus1)?;
            let loss = (logp * onehot(&y, classes, DTYPE)?)?.sum(1)?.neg()?.mean_all()?;
            let v = scalar(&loss)?;
            guard("extractor", self.epoch, &[("xent", v)])?;
            self.opt.step(&loss.backward()?)?;
            acc.add(&[("xent", v)]);
            steps += 1;
        }
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            losses: acc.means(),
            d_steps: 0,
            g_steps: steps,
        })
    }
}

/// Row indices of real instances in an `(N·T)` flattening, with the
/// per-instance weight `1 / (T_i · N)`.
fn live_rows(lengths: &[usize], t: usize) -> Result<(Tensor, Tensor)> {
    let n = lengths.len();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (i, &len) in lengths.iter().enumerate() {
        for j in 0..len {
            rows.push((i * t + j) as u32);
            weights.push(1.0 / (len as f32 * n as f32));
        }
    }
    let k = rows.len();
    Ok((
        Tensor::from_vec(rows, k, &Device::Cpu)?,
        Tensor::from_vec(weights, k, &Device::Cpu)?.to_dtype(DTYPE)?,
    ))
}

/// Adversarial training of the shape generator with instance-wise and
/// global discriminators plus a reconstruction term.
pub struct ShapeTrainer {
    pub stage: ShapeStage,
    config: ShapeStageConfig,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    digest: String,
}

impl ShapeTrainer {
    pub fn new(stage: ShapeStage, config: &ShapeStageConfig, seed: u64, progress: Progress) -> Result<Self> {
        let opt_g = make_adam(&stage.ps, &[ShapeStage::GEN_PREFIX], &config.optimizer, "gen", &progress)?;
        let opt_d = make_adam(&stage.ps, &[ShapeStage::DISC_PREFIX], &config.optimizer, "disc", &progress)?;
        Ok(ShapeTrainer {
            rng: stage_rng(seed, StageId::Shape, &progress),
            stage,
            config: config.clone(),
            opt_g,
            opt_d,
            epoch: progress.epoch,
            digest: progress.config_digest,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch,
            config_digest: self.digest.clone(),
            optimizers: optimizer_states(&[("gen", &self.opt_g), ("disc", &self.opt_d)]),
            rng: Some(self.rng.clone()),
        }
    }

    pub fn run_epoch(&mut self, data: &SceneSet, extractor: &ExtractorStage) -> Result<EpochLog> {
        self.epoch += 1;
        let lr = lr_at(&self.config.optimizer, self.epoch);
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
        let w = self.config.loss;
        let gen = &self.stage.generator;
        let disc = &self.stage.disc;
        let zdim = gen.config().noise_dim;
        let mut acc = Accumulator::default();
        let (mut d_steps, mut g_steps) = (0, 0);
        for idx in minibatches(data.len(), self.config.batch_size, &mut self.rng) {
            let batch = data.instance_batch(&idx, DTYPE)?;
            let (n, t, l, g) = batch.dims()?;
            let real = data.mask_batch(&idx, DTYPE)?;
            let (rows, weights) = live_rows(&batch.lengths, t)?;
            let boxes = batch.boxes.reshape((n * t, l, g, g))?.index_select(&rows, 0)?;
            let gboxes = batch.global_boxes()?;
            let real_inst = real.reshape((n * t, g, g))?.index_select(&rows, 0)?;
            let real_global = real.sum(1)?;

            // discriminator step
            let noise = normal_tensor(&mut self.rng, &[n, t, zdim], DTYPE)?;
            let fake = gen.generate_masks(&batch, &noise)?.detach();
            let fake_inst = fake.reshape((n * t, g, g))?.index_select(&rows, 0)?;
            let di_real = disc.instance.logits(&disc_input(&boxes, &real_inst)?)?;
            let di_fake = disc.instance.logits(&disc_input(&boxes, &fake_inst)?)?;
            let d_inst = ((real_loss(&di_real)? + fake_loss(&di_fake)?)? * &weights)?.sum_all()?;
            let dg_real = disc.global.logits(&disc_input(&gboxes, &real_global)?)?;
            let dg_fake = disc.global.logits(&disc_input(&gboxes, &fake.sum(1)?)?)?;
            let d_global = (real_loss(&dg_real)? + fake_loss(&dg_fake)?)?.mean_all()?;
            let d_loss = ((&d_inst * w.instance)? + (&d_global * w.global)?)?;
            let (vdi, vdg) = (scalar(&d_inst)?, scalar(&d_global)?);
            guard("shape", self.epoch, &[("d_inst", vdi), ("d_global", vdg)])?;
            self.opt_d.step(&d_loss.backward()?)?;
            d_steps += 1;

            // generator step
            let noise = normal_tensor(&mut self.rng, &[n, t, zdim], DTYPE)?;
            let fake = gen.generate_masks(&batch, &noise)?;
            let fake_inst = fake.reshape((n * t, g, g))?.index_select(&rows, 0)?;
            let g_inst = (real_loss(&disc.instance.logits(&disc_input(&boxes, &fake_inst)?)?)? * &weights)?
                .sum_all()?;
            let g_global = real_loss(&disc.global.logits(&disc_input(&gboxes, &fake.sum(1)?)?)?)?.mean_all()?;
            let rec = (reconstruction_per_example(
                self.config.reconstruction,
                &fake_inst.unsqueeze(1)?,
                &real_inst.unsqueeze(1)?,
                &extractor.net,
            )? * &weights)?
                .sum_all()?;
            let g_loss = (((&g_inst * w.instance)? + (&g_global * w.global)?)? + (&rec * w.reconstruction)?)?;
            let (vgi, vgg, vr, vg) = (scalar(&g_inst)?, scalar(&g_global)?, scalar(&rec)?, scalar(&g_loss)?);
            guard("shape", self.epoch, &[("g_inst", vgi), ("g_global", vgg), ("rec", vr)])?;
            self.opt_g.step(&g_loss.backward()?)?;
            g_steps += 1;

            acc.add(&[
                ("d_inst", vdi),
                ("d_global", vdg),
                ("g_inst", vgi),
                ("g_global", vgg),
                ("rec", vr),
                ("g_total", vg),
            ]);
        }
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            losses: acc.means(),
            d_steps,
            g_steps,
        })
    }
}

/// For each row, a different row of the batch chosen uniformly.
pub fn mismatch_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let ids = Tensor::from_vec(rows.iter().map(|&i| i as u32).collect::<Vec<_>>(), rows.len(), &Device::Cpu)?;
    Ok(t.index_select(&ids, 0)?)
}

/// Label maps the image stage conditions on for scenes `idx`.
pub fn training_label_maps(
    data: &SceneSet,
    idx: &[usize],
    source: LayoutSource,
    shape: Option<&ShapeStage>,
    threshold: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    match source {
        LayoutSource::GroundTruth => data.label_maps(idx, DTYPE),
        LayoutSource::Boxes => data.box_maps(idx, DTYPE),
        LayoutSource::Predicted => {
            let shape = shape.ok_or_else(|| {
                TrainError::config("image stage set to predicted layouts but no shape stage given")
            })?;
            let batch = data.instance_batch(idx, DTYPE)?;
            let (n, t, _, _) = batch.dims()?;
            let z = normal_tensor(rng, &[n, t, shape.generator.config().noise_dim], DTYPE)?;
            let masks = shape.generator.generate_masks(&batch, &z)?.detach();
            compose_batch(&batch.boxes, &masks, threshold)
        }
    }
}

/// Differentiable-free label-map composition on tensors: channel `k` is 1
/// where some class-`k` instance mask reaches `threshold`.
pub fn compose_batch(boxes: &Tensor, masks: &Tensor, threshold: f32) -> Result<Tensor> {
    // boxes (N,T,L,G,G) carry the class one-hot inside the box; masks are 0
    // outside padded instances.
    let on = masks.ge(threshold as f64)?.to_dtype(DTYPE)?.unsqueeze(2)?;
    let class = boxes.max(3)?.max(3)?.unsqueeze(3)?.unsqueeze(4)?;
    Ok(on.broadcast_mul(&class)?.max(1)?)
}

/// Adversarial training of the image generator with the matching-aware
/// discriminator loss plus a reconstruction term.
pub struct ImageTrainer {
    pub stage: ImageStage,
    config: ImageStageConfig,
    threshold: f32,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    digest: String,
}

impl ImageTrainer {
    pub fn new(
        stage: ImageStage,
        config: &ImageStageConfig,
        threshold: f32,
        seed: u64,
        progress: Progress,
    ) -> Result<Self> {
        let opt_g = make_adam(&stage.ps, &[ImageStage::GEN_PREFIX], &config.optimizer, "gen", &progress)?;
        let opt_d = make_adam(&stage.ps, &[ImageStage::DISC_PREFIX], &config.optimizer, "disc", &progress)?;
        Ok(ImageTrainer {
            rng: stage_rng(seed, StageId::Image, &progress),
            stage,
            config: config.clone(),
            threshold,
            opt_g,
            opt_d,
            epoch: progress.epoch,
            digest: progress.config_digest,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch,
            config_digest: self.digest.clone(),
            optimizers: optimizer_states(&[("gen", &self.opt_g), ("disc", &self.opt_d)]),
            rng: Some(self.rng.clone()),
        }
    }

    /// One epoch. `text` holds the frozen embeddings of every scene in
    /// `data`, row-aligned.
    pub fn run_epoch(
        &mut self,
        data: &SceneSet,
        text: &Tensor,
        extractor: &ExtractorStage,
        shape: Option<&ShapeStage>,
    ) -> Result<EpochLog> {
        self.epoch += 1;
        let lr = lr_at(&self.config.optimizer, self.epoch);
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
        let w = self.config.loss;
        let zdim = self.stage.generator.config().noise_dim;
        let mut acc = Accumulator::default();
        let (mut d_steps, mut g_steps) = (0, 0);
        for idx in minibatches(data.len(), self.config.batch_size, &mut self.rng) {
            let n = idx.len();
            let m = training_label_maps(data, &idx, self.config.layouts, shape, self.threshold, &mut self.rng)?;
            let x = data.images(&idx, DTYPE)?;
            let s = select_rows(text, &idx)?.detach();
            let gen = &self.stage.generator;
            let disc = &self.stage.disc;

            // discriminator step
            let z = normal_tensor(&mut self.rng, &[n, zdim], DTYPE)?;
            let fake = gen.generate(&m, &s, &z)?.detach();
            let d_real = real_loss(&disc.logits(&m, &s, &x)?)?.mean_all()?;
            let d_fake = fake_loss(&disc.logits(&m, &s, &fake)?)?.mean_all()?;
            let mut d_loss = (&d_real + &d_fake)?;
            let mut v_mis = 0.0;
            if self.config.matching_aware && n > 1 {
                let s_mis = select_rows(&s, &mismatch_indices(n, &mut self.rng))?;
                let d_mis = fake_loss(&disc.logits(&m, &s_mis, &x)?)?.mean_all()?;
                v_mis = scalar(&d_mis)?;
                d_loss = (d_loss + d_mis)?;
            }
            let vd = scalar(&d_loss)?;
            guard("image", self.epoch, &[("d_total", vd)])?;
            self.opt_d.step(&d_loss.backward()?)?;
            d_steps += 1;

            // generator step
            let z = normal_tensor(&mut self.rng, &[n, zdim], DTYPE)?;
            let fake = gen.generate(&m, &s, &z)?;
            let adv = real_loss(&disc.logits(&m, &s, &fake)?)?.mean_all()?;
            let rec = reconstruction_per_example(self.config.reconstruction, &fake, &x, &extractor.net)?
                .mean_all()?;
            let g_loss = ((&adv * w.adversarial)? + (&rec * w.reconstruction)?)?;
            let (va, vr, vg) = (scalar(&adv)?, scalar(&rec)?, scalar(&g_loss)?);
            guard("image", self.epoch, &[("g_adv", va), ("rec", vr)])?;
            self.opt_g.step(&g_loss.backward()?)?;
            g_steps += 1;

            acc.add(&[
                ("d_real", scalar(&d_real)?),
                ("d_fake", scalar(&d_fake)?),
                ("d_mismatch", v_mis),
                ("d_total", vd),
                ("g_adv", va),
                ("rec", vr),
                ("g_total", vg),
            ]);
        }
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            losses: acc.means(),
            d_steps,
            g_steps,
        })
    }
}

/// Frozen text embeddings `(N, D_s)` for every scene of `data`, encoded
/// with the stage's own vocabulary.
pub fn embed_scenes(text: &BoxStage, data: &SceneSet) -> Result<Tensor> {
    let parts = data
        .scenes
        .chunks(256)
        .map(|c| {
            let captions: Vec<&str> = c.iter().map(|s| s.caption.as_str()).collect();
            Ok(text.encode(&captions)?.detach())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatches_never_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..8 {
            for _ in 0..50 {
                let m = mismatch_indices(n, &mut rng);
                assert!(m.iter().enumerate().all(|(i, &j)| i != j && j < n));
            }
        }
    }

    #[test]
    fn live_row_weights_average_per_scene() {
        let (rows, w) = live_rows(&[1, 3], 3).unwrap();
        assert_eq!(rows.to_vec1::<u32>().unwrap(), vec![0, 3, 4, 5]);
        let w = w.to_vec1::<f32>().unwrap();
        assert!((w[0] - 0.5).abs() < 1e-7);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
