//! Quantitative metrics and per-stage evaluation reports.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use hiergen_core::{BoxSpec, LayoutSequence};
use hiergen_models::perceptual::FeatureExtractor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::LayoutSource;
use crate::data::{crop_objects, normal_tensor, SceneSet};
use crate::error::{Result, TrainError};
use crate::schedule::StageId;
use crate::stages::{BoxStage, ExtractorStage, ImageStage, ShapeStage, DTYPE};
use crate::trainer::{embed_scenes, mismatch_indices};

/// One named scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_err: Option<f64>,
}

/// Named metrics of one evaluation run.
///
/// Caption-generation metrics are part of the schema but never computed,
/// so they always serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stage: StageId,
    pub metrics: BTreeMap<String, Metric>,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
    pub cider: Option<f64>,
}

impl MetricReport {
    pub fn new(stage: StageId) -> Self {
        MetricReport {
            stage,
            metrics: BTreeMap::new(),
            bleu: None,
            meteor: None,
            cider: None,
        }
    }

    /// Adds a metric; non-finite values and zero counts are rejected.
    pub fn insert(&mut self, name: &str, value: f64, count: usize, std_err: Option<f64>) -> Result<()> {
        if !value.is_finite() || std_err.is_some_and(|s| !s.is_finite()) {
            return Err(TrainError::config(format!("metric `{name}` is not finite")));
        }
        if count == 0 {
            return Err(TrainError::config(format!("metric `{name}` has no samples")));
        }
        self.metrics.insert(name.to_string(), Metric { value, count, std_err });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `exp(E_x KL(p(y|x) ‖ p̄(y)))` of one group of probability vectors.
fn split_score(probs: &[&Vec<f64>]) -> f64 {
    let c = probs[0].len();
    let n = probs.len() as f64;
    let mut marginal = vec![0.0; c];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p.iter()) {
            *m += v / n;
        }
    }
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    kl.exp()
}

/// Inception-style score over class-probability vectors: the mean and
/// standard deviation across `splits` groups.
///
/// Inputs are put in a canonical order before a seeded shuffle, so the
/// result does not depend on the order of `probs`. With fewer vectors than
/// splits a single group is used.
pub fn classifier_score(probs: &[Vec<f64>], splits: usize, seed: u64) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(TrainError::config("classifier_score needs at least one image"));
    }
    let c = probs[0].len();
    if c == 0 || probs.iter().any(|p| p.len() != c) {
        return Err(TrainError::config("probability vectors differ in length"));
    }
    let mut splits = splits.max(1);
    if probs.len() < splits {
        log::warn!("{} images for {splits} splits; scoring a single split", probs.len());
        splits = 1;
    }
    let mut order: Vec<&Vec<f64>> = probs.iter().collect();
    order.sort_by(|a, b| a.iter().map(|v| v.to_bits()).cmp(b.iter().map(|v| v.to_bits())));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let scores: Vec<f64> = (0..splits)
        .map(|k| split_score(&order[k * n / splits..(k + 1) * n / splits]))
        .collect();
    Ok(mean_std(&scores))
}

/// Class probabilities of the extractor for a batch of images, as rows.
pub fn class_probabilities(fx: &FeatureExtractor, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = 256.min(n - start);
        let p = fx.probabilities(&images.narrow(0, start, len)?)?;
        out.extend(p.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        start += len;
    }
    Ok(out)
}

/// Fraction of rows whose most probable class is the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let best = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            best == Some(l)
        })
        .count();
    hits as f64 / probs.len().max(1) as f64
}

/// Teacher-forced NLL averaged per object, with unit class and coordinate
/// weights and the terminator step included.
pub fn layout_nll(stage: &BoxStage, data: &SceneSet) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::config("layout_nll needs a nonempty dataset"));
    }
    let mut total = 0.0;
    let mut objects = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(128) {
        let captions: Vec<&str> = chunk.iter().map(|&i| data.scenes[i].caption.as_str()).collect();
        let s = stage.encode(&captions)?;
        let layouts = data.layouts(chunk);
        let steps = stage.generator.step_nll(&s, &layouts)?;
        let (c, b) = steps.sums()?;
        total += (c + b)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        objects += layouts.iter().map(|l| l.len()).sum::<usize>();
    }
    Ok(total / objects.max(1) as f64)
}

fn histogram(values: impl Iterator<Item = usize>) -> (BTreeMap<usize, f64>, usize) {
    let mut h = BTreeMap::new();
    let mut n = 0;
    for v in values {
        *h.entry(v).or_insert(0.0) += 1.0;
        n += 1;
    }
    for c in h.values_mut() {
        *c /= n.max(1) as f64;
    }
    (h, n)
}

fn tv(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> f64 {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// Total-variation distances between object-count distributions and
/// between category marginals of two layout sets.
pub fn count_category_tv(sampled: &[LayoutSequence], reference: &[LayoutSequence]) -> Result<(f64, f64)> {
    if sampled.is_empty() || reference.is_empty() {
        return Err(TrainError::config("count_category_tv needs two nonempty sets"));
    }
    let (cs, _) = histogram(sampled.iter().map(LayoutSequence::len));
    let (cr, _) = histogram(reference.iter().map(LayoutSequence::len));
    let (ks, ns) = histogram(sampled.iter().flat_map(|l| l.labels()));
    let (kr, nr) = histogram(reference.iter().flat_map(|l| l.labels()));
    let tv_cat = match (ns, nr) {
        (0, 0) => 0.0,
        (0, _) | (_, 0) => 1.0,
        _ => tv(&ks, &kr),
    };
    Ok((tv(&cs, &cr), tv_cat))
}

/// Intersection over union after thresholding; two empty masks give 1.
pub fn mask_iou(pred: &[f32], gt: &[f32], threshold: f32) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(TrainError::config("mask_iou needs masks of equal size"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= threshold, g >= threshold);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pearson correlation; 0 when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Options shared by the stage evaluations.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    /// Layouts sampled for the distribution diagnostics.
    pub samples: usize,
    pub t_max: usize,
    pub splits: usize,
    pub threshold: f32,
    pub crop_size: usize,
    /// Label maps the image generator is conditioned on.
    pub layouts: LayoutSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            samples: 1000,
            t_max: 20,
            splits: 10,
            threshold: 0.5,
            crop_size: 32,
            layouts: LayoutSource::GroundTruth,
        }
    }
}

/// Sampled layouts for captions drawn cyclically from `data`, with the
/// truncation and correlation-clamp counts.
pub struct LayoutSamples {
    pub layouts: Vec<LayoutSequence>,
    pub truncated: usize,
    pub rho_clamped: usize,
    pub rho_total: usize,
    /// Object count of the ground-truth scene each sample was drawn for.
    pub reference_counts: Vec<usize>,
}

pub fn sample_layouts(stage: &BoxStage, data: &SceneSet, count: usize, t_max: usize, seed: u64) -> Result<LayoutSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = embed_scenes(stage, data)?;
    let mut out = LayoutSamples {
        layouts: Vec::with_capacity(count),
        truncated: 0,
        rho_clamped: 0,
        rho_total: 0,
        reference_counts: Vec::with_capacity(count),
    };
    for k in 0..count {
        let i = k % data.len();
        let r = stage
            .generator
            .sample_layout(&s.narrow(0, i, 1)?, &stage.class_names, &mut rng, t_max)?;
        out.truncated += r.truncated as usize;
        out.rho_clamped += r.rho_clamped;
        out.rho_total += r.rho_total;
        out.layouts.push(r.layout);
        out.reference_counts.push(data.scenes[i].layout.len());
    }
    Ok(out)
}

pub fn evaluate_box(stage: &BoxStage, data: &SceneSet, opts: &EvalOptions) -> Result<MetricReport> {
    let mut r = MetricReport::new(StageId::Box);
    let objects: usize = data.scenes.iter().map(|s| s.layout.len()).sum();
    r.insert("layout_nll_per_object", layout_nll(stage, data)?, objects.max(1), None)?;
    let samples = sample_layouts(stage, data, opts.samples, opts.t_max, opts.seed)?;
    let reference: Vec<LayoutSequence> = data.scenes.iter().map(|s| s.layout.clone()).collect();
    let (tv_count, tv_cat) = count_category_tv(&samples.layouts, &reference)?;
    let n = samples.layouts.len();
    r.insert("tv_count", tv_count, n, None)?;
    r.insert("tv_category", tv_cat, n, None)?;
    let terminated = 1.0 - samples.truncated as f64 / n as f64;
    r.insert(
        "termination_rate",
        terminated,
        n,
        Some((terminated * (1.0 - terminated) / n as f64).sqrt()),
    )?;
    if samples.rho_total > 0 {
        r.insert(
            "rho_clamp_fraction",
            samples.rho_clamped as f64 / samples.rho_total as f64,
            samples.rho_total,
            None,
        )?;
    }
    let sampled: Vec<f64> = samples.layouts.iter().map(|l| l.len() as f64).collect();
    let truth: Vec<f64> = samples.reference_counts.iter().map(|&c| c as f64).collect();
    r.insert("count_correlation", correlation(&sampled, &truth), n, None)?;
    Ok(r)
}

/// Mean IoU of generated masks against the ground truth, and the largest
/// mask value found outside an instance's box.
pub struct ShapeQuality {
    pub mean_iou: f64,
    pub iou_std_err: f64,
    pub instances: usize,
    pub max_outside_box: f64,
}

pub fn shape_quality(stage: &ShapeStage, data: &SceneSet, opts: &EvalOptions) -> Result<ShapeQuality> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let g = data.grid;
    let zdim = stage.generator.config().noise_dim;
    let mut ious = Vec::new();
    let mut outside = 0f64;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(32) {
        let batch = data.instance_batch(chunk, DTYPE)?;
        let (n, t, _, _) = batch.dims()?;
        let z = normal_tensor(&mut rng, &[n, t, zdim], DTYPE)?;
        let masks = stage.generator.generate_masks(&batch, &z)?;
        let occupancy = batch.occupancy()?;
        let beyond = masks.broadcast_mul(&occupancy.affine(-1.0, 1.0)?)?;
        outside = outside.max(beyond.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        let flat = masks.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for (k, &i) in chunk.iter().enumerate() {
            for (j, gt) in data.scenes[i].masks.iter().enumerate() {
                let off = (k * t + j) * g * g;
                ious.push(mask_iou(&flat[off..off + g * g], gt, opts.threshold)?);
            }
        }
    }
    let (mean, std) = mean_std(&ious);
    Ok(ShapeQuality {
        mean_iou: mean,
        iou_std_err: std / (ious.len() as f64).sqrt(),
        instances: ious.len(),
        max_outside_box: outside,
    })
}

pub fn evaluate_shape(stage: &ShapeStage, data: &SceneSet, opts: &EvalOptions) -> Result<MetricReport> {
    let q = shape_quality(stage, data, opts)?;
    let mut r = MetricReport::new(StageId::Shape);
    r.insert("mask_iou", q.mean_iou, q.instances, Some(q.iou_std_err))?;
    r.insert("max_outside_box", q.max_outside_box, q.instances, None)?;
    Ok(r)
}

/// Crops of every object of `data` out of `images`, with labels.
fn crops_at(images: &Tensor, boxes: &[Vec<BoxSpec>], size: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for (i, bs) in boxes.iter().enumerate() {
        let img = images.get(i)?;
        for b in bs {
            items.push((img.clone(), *b));
            labels.push(b.label);
        }
    }
    Ok((crop_objects(&items, size)?, labels))
}

/// Generated-image quality measured with object crops, for the real layout
/// and for a control whose layouts are shuffled across scenes.
pub struct ImageQuality {
    pub crop_accuracy: f64,
    pub control_accuracy: f64,
    pub classifier_score: (f64, f64),
    pub control_score: (f64, f64),
    pub crops: usize,
    /// Mean discriminator score on matched and on mismatched captions.
    pub matched_score: f64,
    pub mismatched_score: f64,
    pub scenes: usize,
}

/// Images generated for scenes `data` from `maps`, batched.
fn generate_all(stage: &ImageStage, maps: &Tensor, text: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = maps.dim(0)?;
    let zdim = stage.generator.config().noise_dim;
    let z = normal_tensor(rng, &[n, zdim], DTYPE)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        parts.push(stage.generator.generate(
            &maps.narrow(0, start, len)?,
            &text.narrow(0, start, len)?,
            &z.narrow(0, start, len)?,
        )?);
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn image_quality(
    stage: &ImageStage,
    text: &BoxStage,
    extractor: &ExtractorStage,
    data: &SceneSet,
    opts: &EvalOptions,
) -> Result<ImageQuality> {
    let n = data.len();
    if n < 2 {
        return Err(TrainError::config("image evaluation needs at least two scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let all: Vec<usize> = (0..n).collect();
    let s = embed_scenes(text, data)?;
    let maps = match opts.layouts {
        LayoutSource::Boxes => data.box_maps(&all, DTYPE)?,
        LayoutSource::GroundTruth | LayoutSource::Predicted => data.label_maps(&all, DTYPE)?,
    };
    let images = generate_all(stage, &maps, &s, &mut rng)?;

    // control: every scene rendered from another scene's layout
    let shuffled = mismatch_indices(n, &mut rng);
    let ids = Tensor::from_vec(shuffled.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, &Device::Cpu)?;
    let control = generate_all(stage, &maps.index_select(&ids, 0)?, &s, &mut rng)?;

    let boxes: Vec<Vec<BoxSpec>> = data.scenes.iter().map(|sc| sc.layout.boxes.clone()).collect();
    let (crops, labels) = crops_at(&images, &boxes, opts.crop_size)?;
    let (control_crops, _) = crops_at(&control, &boxes, opts.crop_size)?;
    let p = class_probabilities(&extractor.net, &crops)?;
    let pc = class_probabilities(&extractor.net, &control_crops)?;

    let real = data.images(&all, DTYPE)?;
    let mis = Tensor::from_vec(
        mismatch_indices(n, &mut rng).into_iter().map(|i| i as u32).collect::<Vec<_>>(),
        n,
        &Device::Cpu,
    )?;
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        let m = maps.narrow(0, start, len)?;
        let x = real.narrow(0, start, len)?;
        let sm = s.narrow(0, start, len)?;
        let sx = s.index_select(&mis.narrow(0, start, len)?, 0)?;
        let sum = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?) };
        matched += sum(stage.disc.score(&m, &sm, &x)?)?;
        mismatched += sum(stage.disc.score(&m, &sx, &x)?)?;
        start += len;
    }

    Ok(ImageQuality {
        crop_accuracy: accuracy(&p, &labels),
        control_accuracy: accuracy(&pc, &labels),
        classifier_score: classifier_score(&p, opts.splits, opts.seed)?,
        control_score: classifier_score(&pc, opts.splits, opts.seed)?,
        crops: labels.len(),
        matched_score: matched / n as f64,
        mismatched_score: mismatched / n as f64,
        scenes: n,
    })
}

pub fn evaluate_image(
    stage: &ImageStage,
    text: &BoxStage,
    extractor: &ExtractorStage,
    data: &SceneSet,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let q = image_quality(stage, text, extractor, data, opts)?;
    let mut r = MetricReport::new(StageId::Image);
    let splits = opts.splits.min(q.crops).max(1);
    r.insert("crop_accuracy", q.crop_accuracy, q.crops, None)?;
    r.insert("control_crop_accuracy", q.control_accuracy, q.crops, None)?;
    r.insert("classifier_score", q.classifier_score.0, splits, Some(q.classifier_score.1))?;
    r.insert("control_classifier_score", q.control_score.0, splits, Some(q.control_score.1))?;
    r.insert("matched_d_score", q.matched_score, q.scenes, None)?;
    r.insert("mismatched_d_score", q.mismatched_score, q.scenes, None)?;
    Ok(r)
}

pub fn evaluate_extractor(stage: &ExtractorStage, data: &SceneSet, opts: &EvalOptions) -> Result<MetricReport> {
    let (crops, labels) = crate::trainer::object_crops(data, opts.crop_size)?;
    let p = class_probabilities(&stage.net, &crops)?;
    let mut r = MetricReport::new(StageId::Extractor);
    r.insert("crop_accuracy", accuracy(&p, &labels), labels.len(), None)?;
    let (score, std) = classifier_score(&p, opts.splits, opts.seed)?;
    r.insert("classifier_score", score, opts.splits.min(labels.len()), Some(std))?;
    Ok(r)
}
