//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and fails if any criterion failed.

use std::io::Write;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use hiergen_core::{
    aggregate_box_tensors, aggregate_masks, compose_label_map, tensorize_box, BoxSpec, ClassGrid,
    InstanceMask, LayoutSequence,
};
use hiergen_models::boxgen::{mixture_log_pdf, BoxGenConfig, BoxGenerator, MixtureParams, NllWeights};
use hiergen_models::gan::{ImageLossWeights, ShapeLossWeights};
use hiergen_models::imagegen::{ImageGenConfig, ImageGenerator};
use hiergen_models::perceptual::{perceptual_distance, ExtractorConfig, FeatureExtractor};
use hiergen_models::ParamStore;
use hiergen_train::config::{Config, PipelineOptions};
use hiergen_train::data::Corpus;
use hiergen_train::eval::{
    count_category_tv, image_quality, layout_nll, sample_layouts, shape_quality, EvalOptions,
};
use hiergen_train::pipeline::{GenerateInput, Pipeline, PipelinePaths};
use hiergen_train::run::{ablation_run, checkpoint_path, train_stage, Ablation, TrainOptions};
use hiergen_train::stages::{BoxStage, ExtractorStage, ImageStage, Progress, ShapeStage};
use hiergen_train::trainer::{
    embed_scenes, object_crops, BoxTrainer, ExtractorTrainer, ImageTrainer, ShapeTrainer,
};
use hiergen_train::StageId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<(bool, String), String>;

fn fail<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

// 1: mixture density normalization and peak

fn random_raw(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut raw = Vec::with_capacity(6 * k);
    raw.extend((0..k).map(|_| -> f64 { StandardNormal.sample(rng) }));
    raw.extend((0..2 * k).map(|_| rng.random_range(0.0..1.0)));
    raw.extend((0..2 * k).map(|_| rng.random_range(-2.5..-0.7)));
    raw.extend((0..k).map(|_| rng.random_range(-2.0..2.0)));
    raw
}

fn integrate(p: &MixtureParams) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let mut width = f64::MAX;
    for j in 0..p.components() {
        let [mx, my] = p.means[j];
        let [sx, sy] = p.scales[j];
        x0 = x0.min(mx - 5.0 * sx);
        x1 = x1.max(mx + 5.0 * sx);
        y0 = y0.min(my - 5.0 * sy);
        y1 = y1.max(my + 5.0 * sy);
        width = width.min(sx.min(sy) * (1.0 - p.corr[j].powi(2)).sqrt());
    }
    let h = width / 2.0;
    let nx = ((x1 - x0) / h).ceil() as usize;
    let ny = ((y1 - y0) / h).ceil() as usize;
    let (hx, hy) = ((x1 - x0) / nx as f64, (y1 - y0) / ny as f64);
    let mut total = 0.0;
    for i in 0..nx {
        let u = x0 + (i as f64 + 0.5) * hx;
        for j in 0..ny {
            total += p.log_pdf(u, y0 + (j as f64 + 0.5) * hy).exp();
        }
    }
    total * hx * hy
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let k = 1 + case % 5;
        let p = MixtureParams::from_raw(&random_raw(&mut rng, k)).map_err(fail)?;
        worst = worst.max((integrate(&p) - 1.0).abs());
    }
    let unit = MixtureParams::from_raw(&[0.0; 6]).map_err(fail)?;
    let peak = unit.log_pdf(0.0, 0.0);
    let raw = Tensor::zeros((1, 6), DType::F64, &Device::Cpu).map_err(fail)?;
    let zero = Tensor::zeros(1, DType::F64, &Device::Cpu).map_err(fail)?;
    let batched = mixture_log_pdf(&raw, &zero, &zero)
        .and_then(|t| Ok(t.to_vec1::<f64>()?[0]))
        .map_err(fail)?;
    let target = (1.0 / (2.0 * std::f64::consts::PI)).ln();
    let peak_err = (peak - target).abs().max((batched - target).abs());
    Ok((
        worst <= 0.01 && peak_err <= 1e-9,
        format!("max |mass-1| = {worst:.2e} over 50 mixtures, peak error {peak_err:.1e}"),
    ))
}

// 2: gradients against central finite differences

/// Relative error `‖g − fd‖ / max(‖g‖, ‖fd‖)` over sampled coordinates of
/// `vars`.
fn grad_error(f: &dyn Fn() -> candle_core::Result<Tensor>, vars: &[Var], per_var: usize, rng: &mut ChaCha8Rng) -> candle_core::Result<f64> {
    let grads = f()?.backward()?;
    let h = 1e-6;
    let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
    for v in vars {
        let g = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; v.elem_count()],
        };
        let base = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let shape = v.dims().to_vec();
        for _ in 0..per_var.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            v.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), &Device::Cpu)?)?;
            let up = f()?.to_scalar::<f64>()?;
            probe[i] = base[i] - h;
            v.set(&Tensor::from_vec(probe, shape.as_slice(), &Device::Cpu)?)?;
            let down = f()?.to_scalar::<f64>()?;
            v.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu)?)?;
            let fd = (up - down) / (2.0 * h);
            diff += (g[i] - fd).powi(2);
            na += g[i].powi(2);
            nf += fd.powi(2);
        }
    }
    Ok(diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> candle_core::Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut ps = ParamStore::new(3, DType::F64);
    let cfg = BoxGenConfig { num_classes: 3, hidden: 8, components: 2, text_dim: 4, t_max: 20, grid: 16 };
    let gen = BoxGenerator::new(&mut ps, "b", cfg).map_err(fail)?;
    let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
    let layouts = [
        LayoutSequence::new(names.clone(), vec![BoxSpec::new(0.1, 0.2, 0.3, 0.25, 1), BoxSpec::new(0.5, 0.1, 0.4, 0.6, 2)]),
        LayoutSequence::new(names, vec![BoxSpec::new(0.3, 0.3, 0.2, 0.2, 0)]),
    ];
    let s = Var::from_tensor(&randn(&mut rng, &[2, 4]).map_err(fail)?).map_err(fail)?;
    let mut vars: Vec<Var> = ps.vars().values().cloned().collect();
    vars.push(s.clone());
    let refs: Vec<&LayoutSequence> = layouts.iter().collect();
    let nll = || gen.sequence_nll(s.as_tensor(), &refs, NllWeights::default()).map_err(to_candle);
    let e_nll = grad_error(&nll, &vars, 4, &mut rng).map_err(fail)?;

    let mut ps = ParamStore::new(4, DType::F64);
    let fx = FeatureExtractor::new(&mut ps, "fx", ExtractorConfig { channels: vec![4, 6], identity_stage: true, num_classes: 3 })
        .map_err(fail)?;
    let a = Var::from_tensor(&randn(&mut rng, &[2, 3, 8, 8]).map_err(fail)?).map_err(fail)?;
    let b = randn(&mut rng, &[2, 3, 8, 8]).map_err(fail)?;
    let pd = || perceptual_distance(a.as_tensor(), &b, &fx).map_err(to_candle);
    let e_pd = grad_error(&pd, &[a.clone()], 40, &mut rng).map_err(fail)?;

    let mut ps = ParamStore::new(5, DType::F64);
    let icfg = ImageGenConfig {
        num_classes: 3,
        grid: 16,
        text_dim: 5,
        channels: 4,
        feature_dim: 6,
        feature_res: 8,
        background_dim: 4,
        noise_dim: 4,
        res_blocks: 1,
        attention: true,
    };
    let ig = ImageGenerator::new(&mut ps, "g", icfg).map_err(fail)?;
    let feat = Var::from_tensor(&randn(&mut rng, &[2, 6, 8, 8]).map_err(fail)?).map_err(fail)?;
    let text = Var::from_tensor(&randn(&mut rng, &[2, 5]).map_err(fail)?).map_err(fail)?;
    let weights = randn(&mut rng, &[2, 6, 8, 8]).map_err(fail)?;
    let gate = || {
        ig.gate_layout(feat.as_tensor(), text.as_tensor())
            .map_err(to_candle)?
            .mul(&weights)?
            .sum_all()
    };
    let mut gate_vars = ps.vars_with_prefix("g.gate").into_iter().map(|(_, v)| v).collect::<Vec<_>>();
    gate_vars.extend([feat.clone(), text.clone()]);
    let e_gate = grad_error(&gate, &gate_vars, 20, &mut rng).map_err(fail)?;

    let worst = e_nll.max(e_pd).max(e_gate);
    Ok((
        worst < 1e-4 && gate_vars.len() > 2,
        format!("relative errors: sequence_nll {e_nll:.1e}, perceptual_distance {e_pd:.1e}, gate_layout {e_gate:.1e}"),
    ))
}

fn to_candle(e: hiergen_models::ModelError) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

// 3: layout algebra against per-cell oracles

fn random_box(rng: &mut ChaCha8Rng, classes: usize) -> BoxSpec {
    let x = rng.random_range(0.0..1.0);
    let y = rng.random_range(0.0..1.0);
    let tiny = rng.random_bool(0.1);
    let w = if tiny { rng.random_range(0.0..0.02) } else { rng.random_range(0.0..=1.0 - x) };
    let h = if tiny { rng.random_range(0.0..0.02) } else { rng.random_range(0.0..=1.0 - y) };
    BoxSpec::new(x, y, w.min(1.0 - x), h.min(1.0 - y), rng.random_range(0..classes))
}

fn box_oracle(b: &BoxSpec, h: usize, w: usize, l: usize) -> ClassGrid {
    let mut g = ClassGrid::zeros(l, h, w);
    let mut any = false;
    for i in 0..h {
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            let cy = (i as f64 + 0.5) / h as f64;
            if b.x <= cx && cx < b.x + b.w && b.y <= cy && cy < b.y + b.h {
                g.set(i, j, b.label, 1);
                any = true;
            }
        }
    }
    if !any {
        let i = ((b.y * h as f64) as usize).min(h - 1);
        let j = ((b.x * w as f64) as usize).min(w - 1);
        g.set(i, j, b.label, 1);
    }
    g
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = [0usize; 4];
    for _ in 0..1000 {
        let (h, w, l) = (rng.random_range(1..24), rng.random_range(1..24), rng.random_range(1..7));
        let boxes: Vec<BoxSpec> = (0..rng.random_range(1..5)).map(|_| random_box(&mut rng, l)).collect();

        let tensors: Vec<ClassGrid> = boxes.iter().map(|b| tensorize_box(b, h, w, l).unwrap()).collect();
        mismatches[0] += boxes
            .iter()
            .zip(&tensors)
            .filter(|(b, t)| **t != box_oracle(b, h, w, l))
            .count();

        let agg = aggregate_box_tensors(&tensors).map_err(fail)?;
        let mut max_ok = true;
        for k in 0..l {
            for i in 0..h {
                for j in 0..w {
                    let m = tensors.iter().map(|t| t.get(i, j, k)).max().unwrap();
                    max_ok &= agg.get(i, j, k) == m;
                }
            }
        }
        mismatches[1] += !max_ok as usize;

        let masks: Vec<InstanceMask> = boxes
            .iter()
            .map(|_| InstanceMask::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..5) as f32 * 0.25).collect()).unwrap())
            .collect();
        let sum = aggregate_masks(&masks).map_err(fail)?;
        let mut add_ok = true;
        for c in 0..h * w {
            let s: f32 = masks.iter().map(|m| m.data[c]).sum();
            add_ok &= sum.data[c] == s;
        }
        mismatches[2] += !add_ok as usize;

        let threshold = [0.25f32, 0.5, 0.75][rng.random_range(0..3)];
        let labels: Vec<usize> = boxes.iter().map(|b| b.label).collect();
        let map = compose_label_map(&masks, &labels, l, h, w, threshold).map_err(fail)?;
        let mut map_ok = true;
        for k in 0..l {
            for i in 0..h {
                for j in 0..w {
                    let on = masks
                        .iter()
                        .zip(&labels)
                        .any(|(m, &lab)| lab == k && m.data[i * w + j] >= threshold);
                    map_ok &= map.get(i, j, k) == on as u8;
                }
            }
        }
        mismatches[3] += !map_ok as usize;
    }
    Ok((
        mismatches.iter().all(|&m| m == 0),
        format!(
            "mismatches over 1000 cases: tensorize {}, max {}, add {}, label map {}",
            mismatches[0], mismatches[1], mismatches[2], mismatches[3]
        ),
    ))
}

// 4-7: trained stages on shape-world

struct Trained {
    cfg: Config,
    corpus: Corpus,
    text: BoxStage,
    extractor: ExtractorStage,
    shape: ShapeStage,
    image: ImageStage,
}

const GAN_SCENES: usize = 640;
const GAN_EPOCHS: usize = 6;
const EVAL_SCENES: usize = 200;

fn criterion_4(cfg: &Config, corpus: &Corpus) -> Result<(Check, BoxStage), String> {
    let mut text = cfg.text.clone();
    text.vocab_size = corpus.vocab.len();
    let stage = BoxStage::new(11, text, cfg.box_stage.model.clone(), corpus.vocab.clone(), corpus.train.class_names.clone())
        .map_err(fail)?;
    let init = layout_nll(&stage, &corpus.val).map_err(fail)?;
    let mut t = BoxTrainer::new(stage, &cfg.box_stage, cfg.seed, Progress::fresh("acceptance".into())).map_err(fail)?;
    for _ in 0..cfg.box_stage.epochs {
        t.run_epoch(&corpus.train).map_err(fail)?;
    }
    let stage = t.stage;
    let last = layout_nll(&stage, &corpus.val).map_err(fail)?;
    let drop = (init - last) / init.abs();
    let samples = sample_layouts(&stage, &corpus.val, 1000, 20, 4).map_err(fail)?;
    let reference: Vec<LayoutSequence> = corpus.val.scenes.iter().map(|s| s.layout.clone()).collect();
    let (tv_count, tv_cat) = count_category_tv(&samples.layouts, &reference).map_err(fail)?;
    let terminated = 1.0 - samples.truncated as f64 / 1000.0;
    let pass = drop >= 0.30 && tv_count <= 0.15 && tv_cat <= 0.15 && terminated >= 0.99;
    let detail = format!(
        "val NLL/object {init:.3} -> {last:.3} (drop {:.0}%) in {} epochs, TV count {tv_count:.3}, TV category {tv_cat:.3}, terminated {:.1}%",
        drop * 100.0,
        cfg.box_stage.epochs,
        terminated * 100.0
    );
    Ok((Ok((pass, detail)), stage))
}

fn train_gan_stages(cfg: &Config, corpus: &Corpus, text: &BoxStage) -> Result<(ExtractorStage, ShapeStage, ImageStage), String> {
    let (crops, labels) = object_crops(&corpus.train, cfg.extractor.crop_size).map_err(fail)?;
    let fx = ExtractorStage::new(12, cfg.extractor.model.clone()).map_err(fail)?;
    let mut et = ExtractorTrainer::new(fx, &cfg.extractor, cfg.seed, Progress::fresh("acceptance".into())).map_err(fail)?;
    for _ in 0..cfg.extractor.epochs {
        et.run_epoch(&crops, &labels).map_err(fail)?;
    }
    let fx = et.stage;

    let subset = corpus.train.subset(&(0..GAN_SCENES).collect::<Vec<_>>());
    let shape = ShapeStage::new(13, cfg.shape_stage.model.clone(), cfg.shape_stage.disc.clone()).map_err(fail)?;
    let mut st = ShapeTrainer::new(shape, &cfg.shape_stage, cfg.seed, Progress::fresh("acceptance".into())).map_err(fail)?;
    for _ in 0..GAN_EPOCHS {
        st.run_epoch(&subset, &fx).map_err(fail)?;
    }

    let s = embed_scenes(text, &subset).map_err(fail)?;
    let image = ImageStage::new(14, cfg.image_stage.model.clone(), cfg.image_stage.disc.clone()).map_err(fail)?;
    let mut it = ImageTrainer::new(image, &cfg.image_stage, cfg.pipeline.threshold, cfg.seed, Progress::fresh("acceptance".into()))
        .map_err(fail)?;
    for _ in 0..GAN_EPOCHS {
        it.run_epoch(&subset, &s, &fx, None).map_err(fail)?;
    }
    Ok((fx, st.stage, it.stage))
}

fn eval_options(cfg: &Config) -> EvalOptions {
    EvalOptions {
        seed: 99,
        crop_size: cfg.extractor.crop_size,
        threshold: cfg.pipeline.threshold,
        ..EvalOptions::default()
    }
}

fn criterion_5(t: &Trained) -> Check {
    let val = t.corpus.val.subset(&(0..EVAL_SCENES).collect::<Vec<_>>());
    let q = shape_quality(&t.shape, &val, &eval_options(&t.cfg)).map_err(fail)?;
    Ok((
        q.mean_iou >= 0.5 && q.max_outside_box == 0.0,
        format!(
            "mean mask IoU {:.3} ± {:.3} over {} held-out instances, max value outside boxes {}",
            q.mean_iou, q.iou_std_err, q.instances, q.max_outside_box
        ),
    ))
}

fn criteria_6_7(t: &Trained) -> Result<(Check, Check), String> {
    let val = t.corpus.val.subset(&(0..EVAL_SCENES).collect::<Vec<_>>());
    let q = image_quality(&t.image, &t.text, &t.extractor, &val, &eval_options(&t.cfg)).map_err(fail)?;
    let six = (
        q.crop_accuracy >= 2.0 * q.control_accuracy && q.classifier_score.0 > q.control_score.0,
        format!(
            "crop accuracy {:.3} vs shuffled-layout control {:.3} ({:.2}x), classifier score {:.3} vs {:.3}",
            q.crop_accuracy,
            q.control_accuracy,
            q.crop_accuracy / q.control_accuracy.max(1e-12),
            q.classifier_score.0,
            q.control_score.0
        ),
    );
    let seven = (
        q.matched_score > q.mismatched_score,
        format!(
            "mean D score matched {:.4} vs mismatched {:.4} on {} held-out scenes",
            q.matched_score, q.mismatched_score, q.scenes
        ),
    );
    Ok((Ok(six), Ok(seven)))
}

// 8: default constants

fn criterion_8() -> Check {
    let c = Config::full_scale();
    let nll = NllWeights::default();
    let shape = ShapeLossWeights::default();
    let image = ImageLossWeights::default();
    let checks = [
        ("box label weight", c.box_stage.loss.label, nll.label, 4.0),
        ("box coordinate weight", c.box_stage.loss.boxes, nll.boxes, 1.0),
        ("shape instance weight", c.shape_stage.loss.instance, shape.instance, 1.0),
        ("shape global weight", c.shape_stage.loss.global, shape.global, 1.0),
        ("shape reconstruction weight", c.shape_stage.loss.reconstruction, shape.reconstruction, 10.0),
        ("image adversarial weight", c.image_stage.loss.adversarial, image.adversarial, 1.0),
        ("image reconstruction weight", c.image_stage.loss.reconstruction, image.reconstruction, 10.0),
        ("box lr", c.box_stage.optimizer.lr, c.box_stage.optimizer.lr, 0.001),
        ("box beta1", c.box_stage.optimizer.beta1, c.box_stage.optimizer.beta1, 0.9),
        ("box beta2", c.box_stage.optimizer.beta2, c.box_stage.optimizer.beta2, 0.999),
        ("shape lr", c.shape_stage.optimizer.lr, c.shape_stage.optimizer.lr, 0.0002),
        ("shape beta1", c.shape_stage.optimizer.beta1, c.shape_stage.optimizer.beta1, 0.5),
        ("shape beta2", c.shape_stage.optimizer.beta2, c.shape_stage.optimizer.beta2, 0.999),
        ("image lr", c.image_stage.optimizer.lr, c.image_stage.optimizer.lr, 0.0002),
        ("image beta1", c.image_stage.optimizer.beta1, c.image_stage.optimizer.beta1, 0.5),
        ("image beta2", c.image_stage.optimizer.beta2, c.image_stage.optimizer.beta2, 0.999),
    ];
    let wrong: Vec<&str> = checks
        .iter()
        .filter(|(_, a, b, want)| a != want || b != want)
        .map(|(name, ..)| *name)
        .collect();
    let round_trip = Config::from_toml(&c.to_toml().map_err(fail)?).map_err(fail)? == c;
    Ok((
        wrong.is_empty() && round_trip,
        if wrong.is_empty() {
            format!("{} constants match; config file round-trip {}", checks.len(), if round_trip { "exact" } else { "differs" })
        } else {
            format!("wrong: {}", wrong.join(", "))
        },
    ))
}

// 9: determinism and resume

fn criterion_9(t: &Trained) -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let progress = Progress::fresh("acceptance".into());
    t.text.save(&checkpoint_path(dir.path(), StageId::Box), &progress).map_err(fail)?;
    t.shape.save(&checkpoint_path(dir.path(), StageId::Shape), &progress).map_err(fail)?;
    t.image.save(&checkpoint_path(dir.path(), StageId::Image), &progress).map_err(fail)?;
    let load = || Pipeline::load(&PipelinePaths::in_dir(dir.path()), PipelineOptions::default()).map_err(fail);
    let (p1, p2) = (load()?, load()?);
    let mut identical = true;
    for (k, scene) in t.corpus.val.scenes.iter().take(5).enumerate() {
        let input = GenerateInput {
            text: Some(scene.caption.clone()),
            seed: 1000 + k as u64,
            ..Default::default()
        };
        let a = p1.generate(&input).map_err(fail)?;
        let b = p2.generate(&input).map_err(fail)?;
        identical &= a.layout == b.layout
            && a.masks == b.masks
            && a.image.to_png().map_err(fail)? == b.image.to_png().map_err(fail)?;
    }

    let mut cfg = t.cfg.clone();
    cfg.data.train_count = 64;
    cfg.data.val_count = 16;
    let corpus = Corpus::shapeworld(&cfg.data).map_err(fail)?;
    let straight = tempfile::tempdir().map_err(fail)?;
    let broken = tempfile::tempdir().map_err(fail)?;
    let mut worst: f64 = 0.0;
    for stage in [StageId::Box, StageId::Extractor, StageId::Shape, StageId::Image] {
        let full = train_stage(&cfg, &corpus, straight.path(), stage, &TrainOptions { epochs: Some(2), ..Default::default() })
            .map_err(fail)?;
        train_stage(&cfg, &corpus, broken.path(), stage, &TrainOptions { epochs: Some(1), ..Default::default() })
            .map_err(fail)?;
        let rest = train_stage(
            &cfg,
            &corpus,
            broken.path(),
            stage,
            &TrainOptions { resume: true, epochs: Some(2), ..Default::default() },
        )
        .map_err(fail)?;
        for (k, v) in &full[1].losses {
            worst = worst.max((v - rest[0].losses[k]).abs());
        }
    }
    Ok((
        identical && worst <= 1e-6,
        format!(
            "repeated generation {}; max resumed-vs-unbroken loss gap {worst:.1e} across 4 stages",
            if identical { "bit-identical" } else { "differs" }
        ),
    ))
}

// 10: ablation smoke runs

fn criterion_10(cfg: &Config, corpus: &Corpus) -> Check {
    let train = corpus.train.subset(&(0..64).collect::<Vec<_>>());
    let val = corpus.val.subset(&(0..32).collect::<Vec<_>>());
    let mut parts = Vec::new();
    let mut ok = true;
    for ablation in Ablation::ALL {
        match ablation_run(cfg, ablation, corpus, &train, &val, 2) {
            Ok(r) => {
                let fine = r.metrics.values().all(|m| m.value.is_finite() && m.count > 0)
                    && r.metrics.contains_key("crop_accuracy");
                ok &= fine;
                parts.push(format!("{} ({} metrics)", ablation.name(), r.metrics.len()));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{} failed: {e}", ablation.name()));
            }
        }
    }
    Ok((ok, parts.join(", ")))
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> (usize, &'static str, Check, f64) {
    let t = Instant::now();
    let r = f();
    (id, name, r, t.elapsed().as_secs_f64())
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    results.push(timed(1, "mixture density normalization", criterion_1));
    results.push(timed(2, "gradient checks", criterion_2));
    results.push(timed(3, "layout algebra oracles", criterion_3));

    let cfg = Config::desk_small();
    let corpus = Corpus::shapeworld(&cfg.data).expect("shape-world corpus");
    let start = Instant::now();
    let (c4, text) = criterion_4(&cfg, &corpus).expect("box training");
    results.push((4, "box generator training", c4, start.elapsed().as_secs_f64()));
    let start = Instant::now();
    let (extractor, shape, image) = train_gan_stages(&cfg, &corpus, &text).expect("stage training");
    let gan_secs = start.elapsed().as_secs_f64();
    let trained = Trained { cfg: cfg.clone(), corpus, text, extractor, shape, image };
    results.push(timed(5, "shape generator masks", || criterion_5(&trained)));
    let start = Instant::now();
    let (c6, c7) = criteria_6_7(&trained).expect("image evaluation");
    results.push((6, "image generator vs shuffled control", c6, start.elapsed().as_secs_f64() + gan_secs));
    results.push((7, "matching-aware discriminator", c7, 0.0));
    results.push(timed(8, "default constants", criterion_8));
    results.push(timed(9, "determinism and resume", || criterion_9(&trained)));
    results.push(timed(10, "ablation smoke runs", || criterion_10(&cfg, &trained.corpus)));

    results.sort_by_key(|r| r.0);
    let mut failed = Vec::new();
    // written to the stdout handle directly so the lines survive output capture
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for (id, name, r, secs) in &results {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed.push(*id);
        }
        writeln!(
            out,
            "criterion {id:>2} [{}] {name}: {detail} ({secs:.1}s)",
            if pass { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
