//! Versioned training configuration, read from and written to TOML.
//!
//! Class count, grid side and text dimension are owned by the `data` and
//! `text` sections; [`Config::resolve`] copies them into every stage so the
//! stage sections never disagree.

use std::path::Path;

use hiergen_core::data::shapeworld::ShapeWorldConfig;
use hiergen_models::boxgen::{BoxGenConfig, NllWeights};
use hiergen_models::gan::{ImageLossWeights, ShapeLossWeights};
use hiergen_models::imagegen::{ImageDiscConfig, ImageGenConfig};
use hiergen_models::perceptual::{ExtractorConfig, ReconstructionLoss};
use hiergen_models::shapegen::{DiscConfig, ShapeGenConfig};
use hiergen_models::text::TextEncoderConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TrainError};
use crate::schedule::{OptimizerSpec, StageId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shapeworld: ShapeWorldConfig,
    pub train_count: usize,
    pub val_count: usize,
    /// Minimum token frequency for the vocabulary.
    pub min_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shapeworld: ShapeWorldConfig::default(),
            train_count: 2000,
            val_count: 500,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxStageConfig {
    pub model: BoxGenConfig,
    pub loss: NllWeights,
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for BoxStageConfig {
    fn default() -> Self {
        BoxStageConfig {
            model: BoxGenConfig::default(),
            loss: NllWeights::default(),
            optimizer: OptimizerSpec::box_default(),
            epochs: 20,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeStageConfig {
    pub model: ShapeGenConfig,
    pub disc: DiscConfig,
    pub loss: ShapeLossWeights,
    pub reconstruction: ReconstructionLoss,
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ShapeStageConfig {
    fn default() -> Self {
        ShapeStageConfig {
            model: ShapeGenConfig::default(),
            disc: DiscConfig::default(),
            loss: ShapeLossWeights::default(),
            reconstruction: ReconstructionLoss::Perceptual,
            optimizer: OptimizerSpec::shape_default(),
            epochs: 100,
            batch_size: 16,
        }
    }
}

/// Label maps the image stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSource {
    /// Composed from ground-truth instance masks.
    #[default]
    GroundTruth,
    /// Composed from shape-generator masks on ground-truth boxes.
    Predicted,
    /// Pixel-wise maximum of the box tensors (no shape generator).
    Boxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageStageConfig {
    pub model: ImageGenConfig,
    pub disc: ImageDiscConfig,
    pub loss: ImageLossWeights,
    pub reconstruction: ReconstructionLoss,
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub layouts: LayoutSource,
    /// Include the real-image/wrong-text term in the discriminator loss.
    pub matching_aware: bool,
}

impl Default for ImageStageConfig {
    fn default() -> Self {
        ImageStageConfig {
            model: ImageGenConfig::default(),
            disc: ImageDiscConfig::default(),
            loss: ImageLossWeights::default(),
            reconstruction: ReconstructionLoss::Perceptual,
            optimizer: OptimizerSpec::image_default(),
            epochs: 60,
            batch_size: 16,
            layouts: LayoutSource::GroundTruth,
            matching_aware: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorStageConfig {
    pub model: ExtractorConfig,
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the object crops the classifier is trained on.
    pub crop_size: usize,
}

impl Default for ExtractorStageConfig {
    fn default() -> Self {
        ExtractorStageConfig {
            model: ExtractorConfig::default(),
            optimizer: OptimizerSpec::extractor_default(),
            epochs: 5,
            batch_size: 32,
            crop_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Off routes the pixel-wise maximum of the box tensors straight to the
    /// image generator.
    pub use_shape_generator: bool,
    pub threshold: f32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            use_shape_generator: true,
            threshold: hiergen_core::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub text: TextEncoderConfig,
    pub box_stage: BoxStageConfig,
    pub shape_stage: ShapeStageConfig,
    pub image_stage: ImageStageConfig,
    pub extractor: ExtractorStageConfig,
    pub pipeline: PipelineOptions,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Config {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            text: TextEncoderConfig::default(),
            box_stage: BoxStageConfig::default(),
            shape_stage: ShapeStageConfig::default(),
            image_stage: ImageStageConfig::default(),
            extractor: ExtractorStageConfig::default(),
            pipeline: PipelineOptions::default(),
        };
        c.resolve();
        c
    }
}

fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&json);
    format!("{:x}", h.finalize())
}

impl Config {
    /// Full-size model at 64×64 with the default hyperparameters.
    pub fn full_scale() -> Self {
        Config::default()
    }

    /// A 32×32 configuration small enough to train every stage on one CPU
    /// core in minutes; all loss weights and optimizer settings keep their
    /// defaults.
    pub fn desk_small() -> Self {
        let mut c = Config::default();
        c.data.shapeworld.image_size = 32;
        c.data.train_count = 2000;
        c.data.val_count = 500;
        c.text.embed_dim = 32;
        c.text.hidden = 64;
        c.text.dim = 64;
        c.box_stage.model.hidden = 64;
        c.shape_stage.model = ShapeGenConfig {
            core_res: 8,
            mask_res: 16,
            channels: 16,
            hidden: 16,
            ..ShapeGenConfig::default()
        };
        c.shape_stage.disc = DiscConfig {
            channels: vec![16, 32, 32],
        };
        c.shape_stage.epochs = 6;
        c.image_stage.model.channels = 16;
        c.image_stage.model.feature_dim = 64;
        c.image_stage.model.background_dim = 16;
        c.image_stage.model.noise_dim = 16;
        c.image_stage.model.res_blocks = 1;
        c.image_stage.disc = ImageDiscConfig {
            channels: 16,
            max_channels: 64,
            final_res: 4,
            text_proj: 16,
        };
        c.image_stage.epochs = 6;
        c.extractor.model.channels = vec![16, 32, 32, 32];
        c.extractor.epochs = 3;
        c.extractor.crop_size = 32;
        c.resolve();
        c
    }

    /// A 16×16 configuration with a handful of scenes that trains every
    /// stage in about a second. Useful for smoke runs only.
    pub fn toy() -> Self {
        let mut c = Config::desk_small();
        c.data.shapeworld.image_size = 16;
        c.data.train_count = 8;
        c.data.val_count = 8;
        c.text.embed_dim = 8;
        c.text.hidden = 8;
        c.text.dim = 8;
        c.box_stage.model.hidden = 8;
        c.box_stage.model.components = 2;
        c.box_stage.batch_size = 4;
        c.shape_stage.model.core_res = 4;
        c.shape_stage.model.mask_res = 8;
        c.shape_stage.model.channels = 4;
        c.shape_stage.model.hidden = 4;
        c.shape_stage.model.noise_dim = 2;
        c.shape_stage.disc.channels = vec![4, 8];
        c.shape_stage.batch_size = 4;
        c.image_stage.model.channels = 4;
        c.image_stage.model.feature_dim = 8;
        c.image_stage.model.background_dim = 4;
        c.image_stage.model.noise_dim = 4;
        c.image_stage.disc.channels = 4;
        c.image_stage.disc.max_channels = 8;
        c.image_stage.disc.text_proj = 4;
        c.image_stage.batch_size = 4;
        c.extractor.model.channels = vec![4, 8];
        c.extractor.batch_size = 4;
        c.extractor.crop_size = 8;
        c.resolve();
        c
    }

    /// Named presets: `full`, `desk-small` and `toy`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Config::full_scale()),
            "desk-small" | "desk_small" => Some(Config::desk_small()),
            "toy" => Some(Config::toy()),
            _ => None,
        }
    }

    /// Copies the shared sizes from the data and text sections into every
    /// stage section.
    pub fn resolve(&mut self) {
        let l = self.data.shapeworld.num_classes;
        let g = self.data.shapeworld.image_size;
        let d = self.text.dim;
        self.box_stage.model.num_classes = l;
        self.box_stage.model.grid = g;
        self.box_stage.model.text_dim = d;
        self.shape_stage.model.num_classes = l;
        self.shape_stage.model.grid = g;
        self.image_stage.model.num_classes = l;
        self.image_stage.model.grid = g;
        self.image_stage.model.text_dim = d;
        self.extractor.model.num_classes = l;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TrainError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.shapeworld.validate()?;
        if self.data.train_count == 0 {
            return Err(TrainError::config("data.train_count must be positive"));
        }
        for (spec, stage) in [
            (&self.box_stage.optimizer, StageId::Box),
            (&self.shape_stage.optimizer, StageId::Shape),
            (&self.image_stage.optimizer, StageId::Image),
            (&self.extractor.optimizer, StageId::Extractor),
        ] {
            if spec.stage != stage {
                return Err(TrainError::config(format!(
                    "{stage} optimizer is labelled `{}`",
                    spec.stage
                )));
            }
            spec.validate()?;
        }
        for (name, b) in [
            ("box_stage", self.box_stage.batch_size),
            ("shape_stage", self.shape_stage.batch_size),
            ("image_stage", self.image_stage.batch_size),
            ("extractor", self.extractor.batch_size),
        ] {
            if b == 0 {
                return Err(TrainError::config(format!("{name}.batch_size must be positive")));
            }
        }
        self.shape_stage.model.validate()?;
        let mut resolved = self.clone();
        resolved.resolve();
        if &resolved != self {
            return Err(TrainError::config(
                "stage sizes disagree with data/text sections; call resolve()",
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Config = toml::from_str(text)?;
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Digest of the parts of the configuration that fix a stage's parameter
    /// shapes. Vocabulary size is supplied separately since it is only known
    /// after the corpus is read.
    pub fn stage_digest(&self, stage: StageId, vocab_size: usize) -> String {
        match stage {
            StageId::Box => {
                let text = TextEncoderConfig {
                    vocab_size,
                    ..self.text.clone()
                };
                digest_of(&("box", &text, &self.box_stage.model))
            }
            StageId::Shape => digest_of(&("shape", &self.shape_stage.model, &self.shape_stage.disc)),
            StageId::Image => digest_of(&("image", &self.image_stage.model, &self.image_stage.disc)),
            StageId::Extractor => digest_of(&("extractor", &self.extractor.model)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Decay;

    #[test]
    fn default_constants() {
        let c = Config::full_scale();
        assert_eq!(c.box_stage.loss.label, 4.0);
        assert_eq!(c.box_stage.loss.boxes, 1.0);
        assert_eq!(c.shape_stage.loss.instance, 1.0);
        assert_eq!(c.shape_stage.loss.global, 1.0);
        assert_eq!(c.shape_stage.loss.reconstruction, 10.0);
        assert_eq!(c.image_stage.loss.adversarial, 1.0);
        assert_eq!(c.image_stage.loss.reconstruction, 10.0);
        assert_eq!((c.box_stage.optimizer.lr, c.box_stage.optimizer.beta1), (0.001, 0.9));
        assert_eq!((c.shape_stage.optimizer.lr, c.shape_stage.optimizer.beta1), (0.0002, 0.5));
        assert_eq!((c.image_stage.optimizer.lr, c.image_stage.optimizer.beta1), (0.0002, 0.5));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        for c in [Config::full_scale(), Config::desk_small()] {
            let text = c.to_toml().unwrap();
            assert_eq!(Config::from_toml(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = Config::from_toml("seed = 9\n[data.shapeworld]\nnum_classes = 4\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.box_stage.model.num_classes, 4);
        assert_eq!(c.image_stage.model.num_classes, 4);
        assert_eq!(c.box_stage.optimizer, OptimizerSpec::box_default());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Config::from_toml("schema_version = 2\n").is_err());
        assert!(Config::from_toml("unknown_key = 1\n").is_err());
        let bad = "[box_stage.optimizer]\nstage = \"shape\"\nlr = 0.1\nbeta1 = 0.9\nbeta2 = 0.9\ndecay = { rule = \"constant\" }\n";
        assert!(Config::from_toml(bad).is_err());
        let ok = "[box_stage.optimizer]\nstage = \"box\"\nlr = 0.1\nbeta1 = 0.9\nbeta2 = 0.9\ndecay = { rule = \"constant\" }\n";
        assert_eq!(Config::from_toml(ok).unwrap().box_stage.optimizer.decay, Decay::Constant);
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = Config::full_scale();
        let mut b = a.clone();
        b.data.shapeworld.num_classes = 5;
        b.resolve();
        assert_ne!(a.stage_digest(StageId::Box, 40), b.stage_digest(StageId::Box, 40));
        assert_ne!(a.stage_digest(StageId::Box, 40), a.stage_digest(StageId::Box, 41));
        let mut c = a.clone();
        c.box_stage.epochs = 3;
        assert_eq!(a.stage_digest(StageId::Box, 40), c.stage_digest(StageId::Box, 40));
    }
}
