//! Trainable stage bundles: the networks of a stage, the parameter store
//! that owns their weights, and conversion to and from checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use hiergen_core::text::Vocabulary;
use hiergen_models::boxgen::{BoxGenConfig, BoxGenerator};
use hiergen_models::imagegen::{ImageDiscConfig, ImageDiscriminator, ImageGenConfig, ImageGenerator};
use hiergen_models::perceptual::{ExtractorConfig, FeatureExtractor};
use hiergen_models::shapegen::{DiscConfig, ShapeDiscriminators, ShapeGenConfig, ShapeGenerator};
use hiergen_models::text::{TextEncoder, TextEncoderConfig};
use hiergen_models::{Adam, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
use crate::error::{Result, TrainError};
use crate::schedule::StageId;

/// Parameter dtype used for training and inference.
pub const DTYPE: DType = DType::F32;

fn payload_field<T: DeserializeOwned>(payload: &serde_json::Value, key: &str) -> Result<T> {
    let v = payload
        .get(key)
        .ok_or_else(|| TrainError::Checkpoint(format!("payload has no `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}

fn expect_stage(ckpt: &Checkpoint, stage: StageId) -> Result<()> {
    if ckpt.stage != stage {
        return Err(TrainError::Checkpoint(format!(
            "expected a {stage} checkpoint, found {}",
            ckpt.stage
        )));
    }
    Ok(())
}

/// Snapshot of named optimizers for a checkpoint.
pub fn optimizer_states(opts: &[(&str, &Adam)]) -> BTreeMap<String, OptimizerState> {
    opts.iter()
        .map(|(name, opt)| {
            (
                name.to_string(),
                OptimizerState {
                    step: opt.steps(),
                    moments: opt.state(),
                },
            )
        })
        .collect()
}

/// Restores optimizer moments and step counts saved by [`optimizer_states`].
pub fn restore_optimizer(opt: &mut Adam, name: &str, states: &BTreeMap<String, OptimizerState>) -> Result<()> {
    let s = states
        .get(name)
        .ok_or_else(|| TrainError::Checkpoint(format!("no optimizer state `{name}`")))?;
    opt.load_state(&s.moments, s.step)?;
    Ok(())
}

/// Training progress carried alongside a stage's weights.
#[derive(Debug, Clone)]
pub struct Progress {
    pub epoch: usize,
    pub config_digest: String,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
}

impl Progress {
    pub fn fresh(config_digest: String) -> Self {
        Progress {
            epoch: 0,
            config_digest,
            optimizers: BTreeMap::new(),
            rng: None,
        }
    }
}

fn checkpoint_of(
    stage: StageId,
    ps: &ParamStore,
    payload: serde_json::Value,
    progress: &Progress,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        stage,
        epoch: progress.epoch,
        config_digest: progress.config_digest.clone(),
        params: ps.snapshot()?,
        optimizers: progress.optimizers.clone(),
        rng: progress.rng.clone(),
        payload,
    })
}

fn progress_of(ckpt: &Checkpoint) -> Progress {
    Progress {
        epoch: ckpt.epoch,
        config_digest: ckpt.config_digest.clone(),
        optimizers: ckpt.optimizers.clone(),
        rng: ckpt.rng.clone(),
    }
}

/// Text encoder and box generator, trained jointly.
pub struct BoxStage {
    pub ps: ParamStore,
    pub text: TextEncoder,
    pub generator: BoxGenerator,
    pub vocab: Vocabulary,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BoxPayload {
    text: TextEncoderConfig,
    model: BoxGenConfig,
    vocab: String,
    classes: Vec<String>,
}

impl BoxStage {
    pub const TEXT_PREFIX: &'static str = "text";
    pub const MODEL_PREFIX: &'static str = "box";

    pub fn new(
        seed: u64,
        text: TextEncoderConfig,
        model: BoxGenConfig,
        vocab: Vocabulary,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if text.vocab_size != vocab.len() {
            return Err(TrainError::config(format!(
                "text encoder sized for {} tokens, vocabulary has {}",
                text.vocab_size,
                vocab.len()
            )));
        }
        if class_names.len() != model.num_classes || text.dim != model.text_dim {
            return Err(TrainError::config("box stage sizes disagree with classes or text"));
        }
        let mut ps = ParamStore::new(seed, DTYPE);
        let text = TextEncoder::new(&mut ps, Self::TEXT_PREFIX, text)?;
        let generator = BoxGenerator::new(&mut ps, Self::MODEL_PREFIX, model)?;
        Ok(BoxStage {
            ps,
            text,
            generator,
            vocab,
            class_names,
        })
    }

    /// Embeddings `(N, D_s)` for captions.
    pub fn encode(&self, texts: &[&str]) -> Result<Tensor> {
        Ok(self.text.encode_texts(&self.vocab, texts)?)
    }

    pub fn encode_ids(&self, ids: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.text.encode_ids(ids)?)
    }

    fn payload(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(BoxPayload {
            text: self.text.config().clone(),
            model: self.generator.config().clone(),
            vocab: self.vocab.to_json(),
            classes: self.class_names.clone(),
        })?)
    }

    pub fn to_checkpoint(&self, progress: &Progress) -> Result<Checkpoint> {
        checkpoint_of(StageId::Box, &self.ps, self.payload()?, progress)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Progress)> {
        expect_stage(ckpt, StageId::Box)?;
        let p: BoxPayload = serde_json::from_value(ckpt.payload.clone())?;
        let vocab = Vocabulary::from_json(&p.vocab)?;
        let stage = BoxStage::new(0, p.text, p.model, vocab, p.classes)?;
        stage.ps.load(&ckpt.params)?;
        Ok((stage, progress_of(ckpt)))
    }

    pub fn save(&self, path: &Path, progress: &Progress) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(progress)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Progress)> {
        BoxStage::from_checkpoint(&load_checkpoint(path, None, false)?)
    }
}

/// Feature extractor with its classification head.
pub struct ExtractorStage {
    pub ps: ParamStore,
    pub net: FeatureExtractor,
}

impl ExtractorStage {
    pub const PREFIX: &'static str = "fx";

    pub fn new(seed: u64, config: ExtractorConfig) -> Result<Self> {
        let mut ps = ParamStore::new(seed, DTYPE);
        let net = FeatureExtractor::new(&mut ps, Self::PREFIX, config)?;
        Ok(ExtractorStage { ps, net })
    }

    pub fn to_checkpoint(&self, progress: &Progress) -> Result<Checkpoint> {
        let payload = serde_json::json!({ "model": self.net.config() });
        checkpoint_of(StageId::Extractor, &self.ps, payload, progress)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Progress)> {
        expect_stage(ckpt, StageId::Extractor)?;
        let stage = ExtractorStage::new(0, payload_field(&ckpt.payload, "model")?)?;
        stage.ps.load(&ckpt.params)?;
        Ok((stage, progress_of(ckpt)))
    }

    pub fn save(&self, path: &Path, progress: &Progress) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(progress)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Progress)> {
        ExtractorStage::from_checkpoint(&load_checkpoint(path, None, false)?)
    }
}

/// Shape generator with its instance and global discriminators.
pub struct ShapeStage {
    pub ps: ParamStore,
    pub generator: ShapeGenerator,
    pub disc: ShapeDiscriminators,
    disc_config: DiscConfig,
}

impl ShapeStage {
    pub const GEN_PREFIX: &'static str = "gen";
    pub const DISC_PREFIX: &'static str = "disc";

    pub fn new(seed: u64, model: ShapeGenConfig, disc: DiscConfig) -> Result<Self> {
        let mut ps = ParamStore::new(seed, DTYPE);
        let generator = ShapeGenerator::new(&mut ps, Self::GEN_PREFIX, model.clone())?;
        let d = ShapeDiscriminators::new(&mut ps, Self::DISC_PREFIX, model.num_classes, model.grid, &disc)?;
        Ok(ShapeStage {
            ps,
            generator,
            disc: d,
            disc_config: disc,
        })
    }

    pub fn to_checkpoint(&self, progress: &Progress) -> Result<Checkpoint> {
        let payload = serde_json::json!({
            "model": self.generator.config(),
            "disc": self.disc_config,
        });
        checkpoint_of(StageId::Shape, &self.ps, payload, progress)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Progress)> {
        expect_stage(ckpt, StageId::Shape)?;
        let stage = ShapeStage::new(
            0,
            payload_field(&ckpt.payload, "model")?,
            payload_field(&ckpt.payload, "disc")?,
        )?;
        stage.ps.load(&ckpt.params)?;
        Ok((stage, progress_of(ckpt)))
    }

    pub fn save(&self, path: &Path, progress: &Progress) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(progress)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Progress)> {
        ShapeStage::from_checkpoint(&load_checkpoint(path, None, false)?)
    }
}

/// Image generator with its discriminator.
pub struct ImageStage {
    pub ps: ParamStore,
    pub generator: ImageGenerator,
    pub disc: ImageDiscriminator,
    disc_config: ImageDiscConfig,
}

impl ImageStage {
    pub const GEN_PREFIX: &'static str = "gen";
    pub const DISC_PREFIX: &'static str = "disc";

    pub fn new(seed: u64, model: ImageGenConfig, disc: ImageDiscConfig) -> Result<Self> {
        let mut ps = ParamStore::new(seed, DTYPE);
        let generator = ImageGenerator::new(&mut ps, Self::GEN_PREFIX, model.clone())?;
        let d = ImageDiscriminator::new(
            &mut ps,
            Self::DISC_PREFIX,
            model.num_classes,
            model.grid,
            model.text_dim,
            &disc,
        )?;
        Ok(ImageStage {
            ps,
            generator,
            disc: d,
            disc_config: disc,
        })
    }

    pub fn to_checkpoint(&self, progress: &Progress) -> Result<Checkpoint> {
        let payload = serde_json::json!({
            "model": self.generator.config(),
            "disc": self.disc_config,
        });
        checkpoint_of(StageId::Image, &self.ps, payload, progress)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Progress)> {
        expect_stage(ckpt, StageId::Image)?;
        let stage = ImageStage::new(
            0,
            payload_field(&ckpt.payload, "model")?,
            payload_field(&ckpt.payload, "disc")?,
        )?;
        stage.ps.load(&ckpt.params)?;
        Ok((stage, progress_of(ckpt)))
    }

    pub fn save(&self, path: &Path, progress: &Progress) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(progress)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Progress)> {
        ImageStage::from_checkpoint(&load_checkpoint(path, None, false)?)
    }
}
