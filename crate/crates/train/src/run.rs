//! Stage orchestration: training a stage from a config with per-epoch
//! checkpoints and resume, in-memory training of the whole stack, and the
//! ablation variants.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hiergen_models::perceptual::ReconstructionLoss;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::config::{Config, LayoutSource};
use crate::data::{Corpus, SceneSet};
use crate::error::{Result, TrainError};
use crate::eval::{evaluate_image, shape_quality, EvalOptions, MetricReport};
use crate::schedule::StageId;
use crate::stages::{BoxStage, ExtractorStage, ImageStage, Progress, ShapeStage};
use crate::trainer::{
    embed_scenes, object_crops, BoxTrainer, EpochLog, ExtractorTrainer, ImageTrainer, ShapeTrainer,
};

/// Parameter-init seed of a stage.
pub fn init_seed(cfg: &Config, stage: StageId) -> u64 {
    cfg.seed.wrapping_mul(31).wrapping_add(1 + stage as u64)
}

/// Checkpoint file of `stage` inside a run directory.
pub fn checkpoint_path(run: &Path, stage: StageId) -> PathBuf {
    run.join(format!("{stage}.ckpt"))
}

fn history_path(run: &Path, stage: StageId) -> PathBuf {
    run.join(format!("{stage}.history.jsonl"))
}

fn append_history(run: &Path, stage: StageId, log: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(history_path(run, stage))?;
    writeln!(f, "{}", serde_json::to_string(log)?)?;
    Ok(())
}

fn epochs_of(cfg: &Config, stage: StageId) -> usize {
    match stage {
        StageId::Box => cfg.box_stage.epochs,
        StageId::Shape => cfg.shape_stage.epochs,
        StageId::Image => cfg.image_stage.epochs,
        StageId::Extractor => cfg.extractor.epochs,
    }
}

fn fresh_box(cfg: &Config, corpus: &Corpus) -> Result<BoxStage> {
    let mut text = cfg.text.clone();
    text.vocab_size = corpus.vocab.len();
    BoxStage::new(
        init_seed(cfg, StageId::Box),
        text,
        cfg.box_stage.model.clone(),
        corpus.vocab.clone(),
        corpus.train.class_names.clone(),
    )
}

fn fresh_extractor(cfg: &Config) -> Result<ExtractorStage> {
    ExtractorStage::new(init_seed(cfg, StageId::Extractor), cfg.extractor.model.clone())
}

fn fresh_shape(cfg: &Config) -> Result<ShapeStage> {
    ShapeStage::new(
        init_seed(cfg, StageId::Shape),
        cfg.shape_stage.model.clone(),
        cfg.shape_stage.disc.clone(),
    )
}

fn fresh_image(cfg: &Config) -> Result<ImageStage> {
    ImageStage::new(
        init_seed(cfg, StageId::Image),
        cfg.image_stage.model.clone(),
        cfg.image_stage.disc.clone(),
    )
}

/// The perceptual extractor a downstream stage needs: loaded from the run
/// directory, or untrained when only an L1 loss is used.
fn upstream_extractor(cfg: &Config, run: &Path, kind: ReconstructionLoss) -> Result<ExtractorStage> {
    let path = checkpoint_path(run, StageId::Extractor);
    if path.exists() {
        return Ok(ExtractorStage::load(&path)?.0);
    }
    match kind {
        ReconstructionLoss::L1 => fresh_extractor(cfg),
        ReconstructionLoss::Perceptual => Err(TrainError::config(format!(
            "{} not found; train the extractor stage first",
            path.display()
        ))),
    }
}

fn upstream(run: &Path, stage: StageId) -> Result<PathBuf> {
    let path = checkpoint_path(run, stage);
    if !path.exists() {
        return Err(TrainError::config(format!(
            "{} not found; train the {stage} stage first",
            path.display()
        )));
    }
    Ok(path)
}

/// Options of [`train_stage`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the stage's checkpoint in the run directory.
    pub resume: bool,
    /// Load a checkpoint even if its config digest differs.
    pub allow_mismatch: bool,
    /// Overrides the configured epoch count.
    pub epochs: Option<usize>,
}

/// Trains `stage` into `run`, writing a checkpoint and a history line after
/// every epoch. Returns the epochs run by this call.
pub fn train_stage(
    cfg: &Config,
    corpus: &Corpus,
    run: &Path,
    stage: StageId,
    opts: &TrainOptions,
) -> Result<Vec<EpochLog>> {
    std::fs::create_dir_all(run)?;
    let digest = cfg.stage_digest(stage, corpus.vocab.len());
    let path = checkpoint_path(run, stage);
    let total = opts.epochs.unwrap_or_else(|| epochs_of(cfg, stage));
    let resumed = if opts.resume {
        Some(load_checkpoint(&path, Some(&digest), opts.allow_mismatch)?)
    } else {
        if history_path(run, stage).exists() {
            std::fs::remove_file(history_path(run, stage))?;
        }
        None
    };
    let mut logs = Vec::new();
    let mut record = |log: EpochLog| -> Result<()> {
        log::info!("{stage} epoch {}: {:?}", log.epoch, log.losses);
        append_history(run, stage, &log)?;
        logs.push(log);
        Ok(())
    };
    match stage {
        StageId::Box => {
            let (s, p) = match &resumed {
                Some(c) => BoxStage::from_checkpoint(c)?,
                None => (fresh_box(cfg, corpus)?, Progress::fresh(digest)),
            };
            let mut t = BoxTrainer::new(s, &cfg.box_stage, cfg.seed, p)?;
            while t.epoch() < total {
                let log = t.run_epoch(&corpus.train)?;
                t.stage.save(&path, &t.progress())?;
                record(log)?;
            }
        }
        StageId::Extractor => {
            let (s, p) = match &resumed {
                Some(c) => ExtractorStage::from_checkpoint(c)?,
                None => (fresh_extractor(cfg)?, Progress::fresh(digest)),
            };
            let (crops, labels) = object_crops(&corpus.train, cfg.extractor.crop_size)?;
            let mut t = ExtractorTrainer::new(s, &cfg.extractor, cfg.seed, p)?;
            while t.epoch() < total {
                let log = t.run_epoch(&crops, &labels)?;
                t.stage.save(&path, &t.progress())?;
                record(log)?;
            }
        }
        StageId::Shape => {
            let fx = upstream_extractor(cfg, run, cfg.shape_stage.reconstruction)?;
            let (s, p) = match &resumed {
                Some(c) => ShapeStage::from_checkpoint(c)?,
                None => (fresh_shape(cfg)?, Progress::fresh(digest)),
            };
            let mut t = ShapeTrainer::new(s, &cfg.shape_stage, cfg.seed, p)?;
            while t.epoch() < total {
                let log = t.run_epoch(&corpus.train, &fx)?;
                t.stage.save(&path, &t.progress())?;
                record(log)?;
            }
        }
        StageId::Image => {
            let fx = upstream_extractor(cfg, run, cfg.image_stage.reconstruction)?;
            let (text, _) = BoxStage::load(&upstream(run, StageId::Box)?)?;
            let shape = match cfg.image_stage.layouts {
                LayoutSource::Predicted => Some(ShapeStage::load(&upstream(run, StageId::Shape)?)?.0),
                _ => None,
            };
            let s_all = embed_scenes(&text, &corpus.train)?;
            let (s, p) = match &resumed {
                Some(c) => ImageStage::from_checkpoint(c)?,
                None => (fresh_image(cfg)?, Progress::fresh(digest)),
            };
            let mut t = ImageTrainer::new(s, &cfg.image_stage, cfg.pipeline.threshold, cfg.seed, p)?;
            while t.epoch() < total {
                let log = t.run_epoch(&corpus.train, &s_all, &fx, shape.as_ref())?;
                t.stage.save(&path, &t.progress())?;
                record(log)?;
            }
        }
    }
    Ok(logs)
}

/// Every stage trained in memory.
pub struct TrainedStack {
    pub box_stage: BoxStage,
    pub extractor: ExtractorStage,
    pub shape: Option<ShapeStage>,
    pub image: ImageStage,
    pub histories: Vec<(StageId, Vec<EpochLog>)>,
}

/// Trains box, extractor, shape (when the config uses it) and image stages
/// on `train` for `epochs` each, or the configured counts when `None`.
pub fn train_stack(cfg: &Config, corpus: &Corpus, train: &SceneSet, epochs: Option<usize>) -> Result<TrainedStack> {
    let n = |stage| epochs.unwrap_or_else(|| epochs_of(cfg, stage));
    let digest = |stage| cfg.stage_digest(stage, corpus.vocab.len());
    let mut histories = Vec::new();

    let mut bt = BoxTrainer::new(fresh_box(cfg, corpus)?, &cfg.box_stage, cfg.seed, Progress::fresh(digest(StageId::Box)))?;
    let logs = (0..n(StageId::Box)).map(|_| bt.run_epoch(train)).collect::<Result<Vec<_>>>()?;
    histories.push((StageId::Box, logs));

    let (crops, labels) = object_crops(train, cfg.extractor.crop_size)?;
    let mut et = ExtractorTrainer::new(
        fresh_extractor(cfg)?,
        &cfg.extractor,
        cfg.seed,
        Progress::fresh(digest(StageId::Extractor)),
    )?;
    let logs = (0..n(StageId::Extractor))
        .map(|_| et.run_epoch(&crops, &labels))
        .collect::<Result<Vec<_>>>()?;
    histories.push((StageId::Extractor, logs));

    let needs_shape = cfg.pipeline.use_shape_generator;
    let shape = if needs_shape {
        let mut st = ShapeTrainer::new(fresh_shape(cfg)?, &cfg.shape_stage, cfg.seed, Progress::fresh(digest(StageId::Shape)))?;
        let logs = (0..n(StageId::Shape))
            .map(|_| st.run_epoch(train, &et.stage))
            .collect::<Result<Vec<_>>>()?;
        histories.push((StageId::Shape, logs));
        Some(st.stage)
    } else {
        None
    };

    let s_all = embed_scenes(&bt.stage, train)?;
    let mut it = ImageTrainer::new(
        fresh_image(cfg)?,
        &cfg.image_stage,
        cfg.pipeline.threshold,
        cfg.seed,
        Progress::fresh(digest(StageId::Image)),
    )?;
    let logs = (0..n(StageId::Image))
        .map(|_| it.run_epoch(train, &s_all, &et.stage, shape.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    histories.push((StageId::Image, logs));

    Ok(TrainedStack {
        box_stage: bt.stage,
        extractor: et.stage,
        shape,
        image: it.stage,
        histories,
    })
}

/// Architecture and loss variants, each a switch on the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// The image generator sees the pixel-wise maximum of the box tensors.
    NoShapeGenerator,
    /// Pixel L1 replaces the perceptual reconstruction loss.
    L1Reconstruction,
    /// The layout features are not gated by the text.
    NoAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::NoShapeGenerator,
        Ablation::L1Reconstruction,
        Ablation::NoAttention,
    ];

    pub fn apply(self, cfg: &mut Config) {
        match self {
            Ablation::NoShapeGenerator => {
                cfg.pipeline.use_shape_generator = false;
                cfg.image_stage.layouts = LayoutSource::Boxes;
            }
            Ablation::L1Reconstruction => {
                cfg.shape_stage.reconstruction = ReconstructionLoss::L1;
                cfg.image_stage.reconstruction = ReconstructionLoss::L1;
            }
            Ablation::NoAttention => cfg.image_stage.model.attention = false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoShapeGenerator => "no_shape_generator",
            Ablation::L1Reconstruction => "l1_reconstruction",
            Ablation::NoAttention => "no_attention",
        }
    }
}

impl FromStr for Ablation {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TrainError::config(format!("unknown ablation `{s}`")))
    }
}

/// Trains the stack under `ablation` for `epochs` per stage on `train` and
/// reports image metrics on `val`, plus mask IoU when masks are generated.
pub fn ablation_run(
    base: &Config,
    ablation: Ablation,
    corpus: &Corpus,
    train: &SceneSet,
    val: &SceneSet,
    epochs: usize,
) -> Result<MetricReport> {
    let mut cfg = base.clone();
    ablation.apply(&mut cfg);
    cfg.validate()?;
    let stack = train_stack(&cfg, corpus, train, Some(epochs))?;
    let opts = EvalOptions {
        seed: cfg.seed,
        crop_size: cfg.extractor.crop_size,
        threshold: cfg.pipeline.threshold,
        layouts: cfg.image_stage.layouts,
        ..EvalOptions::default()
    };
    let mut report = evaluate_image(&stack.image, &stack.box_stage, &stack.extractor, val, &opts)?;
    if let Some(shape) = &stack.shape {
        let q = shape_quality(shape, val, &opts)?;
        report.insert("mask_iou", q.mean_iou, q.instances, Some(q.iou_std_err))?;
    }
    Ok(report)
}
