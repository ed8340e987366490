//! `hiergen`: dataset creation, per-stage training, sampling, end-to-end
//! generation, evaluation and serving. All randomness comes from `--seed`
//! flags or the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hiergen_core::data::shapeworld::{generate_shapeworld, ShapeWorldConfig};
use hiergen_core::data::store::{read_dataset, write_example};
use hiergen_core::data::{shapeworld::shapeworld_split, split_of, Split};
use hiergen_core::text::{build_vocab, Vocabulary};
use hiergen_core::{LayoutSequence, Rle};
use hiergen_server::AppState;
use hiergen_train::config::{Config, PipelineOptions};
use hiergen_train::data::{Corpus, SceneSet};
use hiergen_train::eval::{evaluate_box, evaluate_extractor, evaluate_image, evaluate_shape, EvalOptions};
use hiergen_train::pipeline::{sample_layout, GenerateInput, Pipeline, PipelinePaths};
use hiergen_train::run::{checkpoint_path, train_stage, TrainOptions};
use hiergen_train::stages::{BoxStage, ExtractorStage, ImageStage, ShapeStage};
use hiergen_train::StageId;

#[derive(Parser)]
#[command(name = "hiergen", version, about = "Hierarchical text-to-image generation: text to layout to masks to image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedurally generated shape-world dataset.
    MakeShapeworld(MakeShapeworld),
    /// Train one stage, or every stage in dependency order.
    Train(Train),
    /// Sample layouts from a box-stage checkpoint.
    Sample(Sample),
    /// Run the full pipeline and write layout.json, masks.json and image.png.
    Generate(Generate),
    /// Evaluate one stage checkpoint and print a JSON metric report.
    Eval(Eval),
    /// Serve the HTTP API.
    Serve(Serve),
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Box,
    Shape,
    Image,
    Extractor,
}

impl From<Stage> for StageId {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Box => StageId::Box,
            Stage::Shape => StageId::Shape,
            Stage::Image => StageId::Image,
            Stage::Extractor => StageId::Extractor,
        }
    }
}

#[derive(Args)]
struct MakeShapeworld {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ShapeWorldConfig::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = ShapeWorldConfig::default().max_objects)]
    max_objects: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: full, desk-small or toy.
    #[arg(long, default_value = "desk-small")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => match Config::preset(&self.preset) {
                Some(c) => c,
                None => bail!("unknown preset `{}` (expected full, desk-small or toy)", self.preset),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory holding checkpoints and histories.
    #[arg(long)]
    run: PathBuf,
    /// Stage to train; all stages in order when omitted.
    #[arg(long, value_enum)]
    stage: Option<Stage>,
    /// Continue from the stage checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Load checkpoints written under a different configuration.
    #[arg(long)]
    allow_mismatch: bool,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory written by make-shapeworld; the config's generated
    /// shape-world split is used otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Sample {
    /// Box checkpoint, or a run directory containing box.ckpt.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    seed: u64,
    /// Number of layouts; sample i uses seed + i.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

#[derive(Args)]
struct Generate {
    /// Run directory with box.ckpt, image.ckpt and optionally shape.ckpt.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Layout JSON to use instead of sampling one.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Condition the image stage on filled boxes instead of generated masks.
    #[arg(long)]
    no_shape: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Stage checkpoint; image evaluation also reads box.ckpt and
    /// extractor.ckpt from the same directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Held-out scenes to evaluate on.
    #[arg(long, default_value_t = 500)]
    scenes: usize,
    /// Layouts sampled for the box-stage distribution metrics.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Serve {
    /// Run directory to load; without it the server answers 503 until an
    /// admin reload names one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Listen address; defaults to $HIERGEN_ADDR, then 127.0.0.1:8080.
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    no_shape: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeShapeworld(a) => make_shapeworld(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn make_shapeworld(a: MakeShapeworld) -> Result<()> {
    let cfg = ShapeWorldConfig {
        image_size: a.image_size,
        max_objects: a.max_objects,
        seed: a.seed,
        ..ShapeWorldConfig::default()
    };
    cfg.validate()?;
    for i in 0..a.count as u64 {
        write_example(&a.out, &generate_shapeworld(&cfg, i))?;
    }
    log::info!("wrote {} examples to {}", a.count, a.out.display());
    Ok(())
}

/// Training corpus; a dataset directory also fixes the image size and class
/// count in `cfg`.
fn corpus_for(cfg: &mut Config, data: Option<&Path>) -> Result<Corpus> {
    let Some(dir) = data else {
        return Ok(Corpus::shapeworld(&cfg.data)?);
    };
    let examples = read_dataset(dir).with_context(|| format!("reading {}", dir.display()))?;
    if let Some(first) = examples.first() {
        cfg.data.shapeworld.image_size = first.image.height;
        cfg.data.shapeworld.num_classes = first.layout.num_classes();
        cfg.resolve();
        cfg.validate()?;
    }
    let (train, val): (Vec<_>, Vec<_>) = examples
        .into_iter()
        .partition(|e| split_of(cfg.data.shapeworld.seed, e.id) == Split::Train);
    if train.is_empty() || val.is_empty() {
        bail!("{} needs examples in both the train and validation splits", dir.display());
    }
    Ok(Corpus::from_examples(&train, &val, cfg.data.min_freq)?)
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    let corpus = corpus_for(&mut cfg, a.data.as_deref())?;
    let stages: Vec<StageId> = match a.stage {
        Some(s) => vec![s.into()],
        None => {
            let mut v = vec![StageId::Box, StageId::Extractor];
            if cfg.pipeline.use_shape_generator {
                v.push(StageId::Shape);
            }
            v.push(StageId::Image);
            v
        }
    };
    let opts = TrainOptions {
        resume: a.resume,
        allow_mismatch: a.allow_mismatch,
        epochs: a.epochs,
    };
    fs::create_dir_all(&a.run)?;
    cfg.save(&a.run.join("config.toml"))?;
    for stage in stages {
        for log in train_stage(&cfg, &corpus, &a.run, stage, &opts)? {
            println!("{}", serde_json::json!({"stage": stage.as_str(), "log": log}));
        }
    }
    Ok(())
}

fn stage_file(path: &Path, stage: StageId) -> PathBuf {
    if path.is_dir() {
        checkpoint_path(path, stage)
    } else {
        path.to_path_buf()
    }
}

fn sample(a: Sample) -> Result<()> {
    let path = stage_file(&a.checkpoint, StageId::Box);
    let (stage, _) = BoxStage::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let t_max = stage.generator.config().t_max;
    for i in 0..a.count {
        let seed = a.seed + i;
        let s = sample_layout(&stage, &a.text, seed, t_max)?;
        println!("{}", serde_json::json!({"seed": seed, "truncated": s.truncated, "layout": s.layout}));
    }
    Ok(())
}

fn generate(a: Generate) -> Result<()> {
    let options = PipelineOptions {
        use_shape_generator: !a.no_shape,
        ..PipelineOptions::default()
    };
    let p = Pipeline::load(&PipelinePaths::in_dir(&a.checkpoint), options)
        .with_context(|| format!("loading pipeline from {}", a.checkpoint.display()))?;
    let layout = match &a.layout {
        Some(path) => Some(LayoutSequence::from_json(&fs::read_to_string(path)?)?),
        None => None,
    };
    if layout.is_none() && a.text.as_deref().is_none_or(|t| t.trim().is_empty()) {
        bail!("--text is required unless --layout is given");
    }
    let g = p.generate(&GenerateInput {
        text: a.text,
        seed: a.seed,
        layout,
        masks: None,
    })?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("layout.json"), g.layout.to_json())?;
    let masks: Vec<Rle> = g.masks.iter().map(|m| Rle::from_mask(m, p.options.threshold)).collect();
    fs::write(a.out.join("masks.json"), serde_json::to_string(&masks)?)?;
    fs::write(a.out.join("image.png"), g.image.to_png()?)?;
    log::info!("model {}: wrote {} objects to {}", p.version().combined(), g.layout.len(), a.out.display());
    Ok(())
}

/// Validation scenes; captions are encoded with `vocab`, or with a
/// vocabulary of their own when the stage does not read text.
fn held_out(cfg: &ShapeWorldConfig, count: usize, vocab: Option<&Vocabulary>) -> Result<SceneSet> {
    let examples = shapeworld_split(cfg, Split::Val, count);
    let own;
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let captions: Vec<&str> = examples.iter().flat_map(|e| e.captions.iter().map(String::as_str)).collect();
            own = build_vocab(&captions, 1)?;
            &own
        }
    };
    Ok(SceneSet::from_examples(&examples, vocab)?)
}

fn sibling(path: &Path, stage: StageId) -> PathBuf {
    checkpoint_path(path.parent().unwrap_or(Path::new(".")), stage)
}

fn eval(a: Eval) -> Result<()> {
    let cfg = a.config.load()?;
    let mut world = cfg.data.shapeworld.clone();
    let opts = EvalOptions {
        seed: a.seed,
        samples: a.samples,
        crop_size: cfg.extractor.crop_size,
        threshold: cfg.pipeline.threshold,
        ..EvalOptions::default()
    };
    let stage: StageId = a.stage.into();
    let path = &a.checkpoint;
    let load_err = || format!("loading {}", path.display());
    let report = match stage {
        StageId::Box => {
            let (s, _) = BoxStage::load(path).with_context(load_err)?;
            world.image_size = s.generator.config().grid;
            world.num_classes = s.class_names.len();
            evaluate_box(&s, &held_out(&world, a.scenes, Some(&s.vocab))?, &opts)?
        }
        StageId::Shape => {
            let (s, _) = ShapeStage::load(path).with_context(load_err)?;
            world.image_size = s.generator.config().grid;
            world.num_classes = s.generator.config().num_classes;
            evaluate_shape(&s, &held_out(&world, a.scenes, None)?, &opts)?
        }
        StageId::Image => {
            let (s, _) = ImageStage::load(path).with_context(load_err)?;
            let text_path = sibling(path, StageId::Box);
            let fx_path = sibling(path, StageId::Extractor);
            let (text, _) = BoxStage::load(&text_path).with_context(|| format!("loading {}", text_path.display()))?;
            let (fx, _) = ExtractorStage::load(&fx_path).with_context(|| format!("loading {}", fx_path.display()))?;
            world.image_size = s.generator.config().grid;
            world.num_classes = s.generator.config().num_classes;
            evaluate_image(&s, &text, &fx, &held_out(&world, a.scenes, Some(&text.vocab))?, &opts)?
        }
        StageId::Extractor => {
            let (s, _) = ExtractorStage::load(path).with_context(load_err)?;
            evaluate_extractor(&s, &held_out(&world, a.scenes, None)?, &opts)?
        }
    };
    println!("{}", report.to_json());
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let options = PipelineOptions {
        use_shape_generator: !a.no_shape,
        ..PipelineOptions::default()
    };
    let state = match a.checkpoint {
        Some(dir) => AppState::load_dir(dir.clone(), options)
            .with_context(|| format!("loading pipeline from {}", dir.display()))?,
        None => AppState::empty(options),
    };
    let addr = hiergen_server::resolve_addr(a.addr.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(hiergen_server::serve(&addr, Arc::new(state)))?;
    Ok(())
}
