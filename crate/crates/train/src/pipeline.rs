//! End-to-end inference: text → layout → instance masks → image.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use hiergen_core::imageio::Image;
use hiergen_core::{
    compose_label_map, tensorize_box, ClassGrid, InstanceMask, LayoutSequence,
};
use hiergen_models::boxgen::SampledLayout;
use hiergen_models::shapegen::InstanceBatch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineOptions;
use crate::data::{box_tensors, normal_tensor};
use crate::error::{Result, TrainError};
use crate::stages::{BoxStage, ImageStage, ShapeStage, DTYPE};

const BOX_STREAM: u64 = 0;
const SHAPE_STREAM: u64 = 1;
const IMAGE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Layout for `text` drawn with the same random stream the full pipeline
/// uses, so a box checkpoint alone reproduces the pipeline's layouts.
pub fn sample_layout(stage: &BoxStage, text: &str, seed: u64, t_max: usize) -> Result<SampledLayout> {
    let s = stage.encode(&[text])?;
    let mut rng = stream(seed, BOX_STREAM);
    Ok(stage.generator.sample_layout(&s, &stage.class_names, &mut rng, t_max)?)
}

/// Parameter digests of the loaded stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersion {
    #[serde(rename = "box")]
    pub box_stage: String,
    pub shape: Option<String>,
    pub image: String,
}

impl ModelVersion {
    /// One string naming the whole snapshot.
    pub fn combined(&self) -> String {
        let shape = self.shape.as_deref().unwrap_or("none");
        format!("{}-{}-{}", &self.box_stage[..12], &shape[..shape.len().min(12)], &self.image[..12])
    }
}

/// Checkpoint files making up a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePaths {
    #[serde(rename = "box")]
    pub box_stage: PathBuf,
    pub shape: Option<PathBuf>,
    pub image: PathBuf,
}

impl PipelinePaths {
    /// `box.ckpt`, `image.ckpt` and, when present, `shape.ckpt` in `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let shape = dir.join("shape.ckpt");
        PipelinePaths {
            box_stage: dir.join("box.ckpt"),
            shape: shape.exists().then_some(shape),
            image: dir.join("image.ckpt"),
        }
    }
}

/// What to generate; supplied layout or masks skip the stages producing them.
#[derive(Debug, Clone, Default)]
pub struct GenerateInput {
    pub text: Option<String>,
    pub seed: u64,
    pub layout: Option<LayoutSequence>,
    pub masks: Option<Vec<InstanceMask>>,
}

/// Every intermediate of one generation.
#[derive(Debug, Clone)]
pub struct Generation {
    pub layout: LayoutSequence,
    pub masks: Vec<InstanceMask>,
    pub label_map: ClassGrid,
    pub image: Image,
    pub seed: u64,
}

pub struct Pipeline {
    pub box_stage: BoxStage,
    pub shape: Option<ShapeStage>,
    pub image: ImageStage,
    pub options: PipelineOptions,
    pub t_max: usize,
    version: ModelVersion,
}

impl Pipeline {
    pub fn new(
        box_stage: BoxStage,
        shape: Option<ShapeStage>,
        image: ImageStage,
        options: PipelineOptions,
    ) -> Result<Self> {
        let l = box_stage.class_names.len();
        let g = box_stage.generator.config().grid;
        let ic = image.generator.config();
        if ic.num_classes != l || ic.grid != g || ic.text_dim != box_stage.text.dim() {
            return Err(TrainError::config("image stage does not match the box stage"));
        }
        if let Some(s) = &shape {
            let sc = s.generator.config();
            if sc.num_classes != l || sc.grid != g {
                return Err(TrainError::config("shape stage does not match the box stage"));
            }
        }
        let version = ModelVersion {
            box_stage: box_stage.ps.digest()?,
            shape: shape.as_ref().map(|s| s.ps.digest()).transpose()?,
            image: image.ps.digest()?,
        };
        let t_max = box_stage.generator.config().t_max;
        Ok(Pipeline {
            box_stage,
            shape,
            image,
            options,
            t_max,
            version,
        })
    }

    pub fn load(paths: &PipelinePaths, options: PipelineOptions) -> Result<Self> {
        let (b, _) = BoxStage::load(&paths.box_stage)?;
        let s = paths.shape.as_deref().map(ShapeStage::load).transpose()?.map(|(s, _)| s);
        let (i, _) = ImageStage::load(&paths.image)?;
        Pipeline::new(b, s, i, options)
    }

    pub fn version(&self) -> &ModelVersion {
        &self.version
    }

    pub fn classes(&self) -> &[String] {
        &self.box_stage.class_names
    }

    pub fn grid(&self) -> usize {
        self.box_stage.generator.config().grid
    }

    fn embed(&self, text: Option<&str>) -> Result<Tensor> {
        match text {
            Some(t) => self.box_stage.encode(&[t]),
            None => Ok(Tensor::zeros((1, self.box_stage.text.dim()), DTYPE, &Device::Cpu)?),
        }
    }

    pub fn sample_layout(&self, text: &str, seed: u64) -> Result<SampledLayout> {
        sample_layout(&self.box_stage, text, seed, self.t_max)
    }

    /// Instance masks for `layout`: the shape generator's output, or filled
    /// boxes when it is disabled or absent.
    pub fn masks_for(&self, layout: &LayoutSequence, seed: u64) -> Result<Vec<InstanceMask>> {
        let g = self.grid();
        let l = self.classes().len();
        let shape = self.shape.as_ref().filter(|_| self.options.use_shape_generator);
        let Some(shape) = shape.filter(|_| !layout.is_empty()) else {
            return layout
                .boxes
                .iter()
                .map(|b| {
                    let t = tensorize_box(b, g, g, l)?;
                    Ok(InstanceMask::from_binary(g, g, &t.occupancy()))
                })
                .collect();
        };
        let batch = InstanceBatch::from_scenes(&[box_tensors(&layout.boxes, l, g)?], l, g, DTYPE)?;
        let mut rng = stream(seed, SHAPE_STREAM);
        let z = normal_tensor(&mut rng, &[1, layout.len(), shape.generator.config().noise_dim], DTYPE)?;
        let m = shape.generator.generate_masks(&batch, &z)?.squeeze(0)?.to_vec3::<f32>()?;
        m.into_iter()
            .map(|rows| Ok(InstanceMask::from_vec(g, g, rows.concat())?))
            .collect()
    }

    /// Label map conditioning the image generator. With filled-box masks
    /// this equals the pixel-wise maximum of the box tensors.
    pub fn label_map(&self, layout: &LayoutSequence, masks: &[InstanceMask]) -> Result<ClassGrid> {
        let g = self.grid();
        let l = self.classes().len();
        if masks.is_empty() {
            return Ok(ClassGrid::zeros(l, g, g));
        }
        Ok(compose_label_map(masks, &layout.labels(), l, g, g, self.options.threshold)?)
    }

    /// Image from a label map and optional caption.
    pub fn render(&self, label_map: &ClassGrid, text: Option<&str>, seed: u64) -> Result<Image> {
        let g = self.grid();
        let m = Tensor::from_vec(label_map.to_f32(), (1, label_map.channels, g, g), &Device::Cpu)?
            .to_dtype(DTYPE)?;
        let s = self.embed(text)?;
        let mut rng = stream(seed, IMAGE_STREAM);
        let z = normal_tensor(&mut rng, &[1, self.image.generator.config().noise_dim], DTYPE)?;
        let x = self.image.generator.generate(&m, &s, &z)?.squeeze(0)?;
        let chw = x.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Image::from_chw(g, g, &chw)?)
    }

    fn check_masks(&self, layout: &LayoutSequence, masks: &[InstanceMask]) -> Result<()> {
        let g = self.grid();
        if masks.len() != layout.len() {
            return Err(hiergen_core::CoreError::field(
                "masks",
                format!("{} masks for {} boxes", masks.len(), layout.len()),
            )
            .into());
        }
        for (i, m) in masks.iter().enumerate() {
            if m.height != g || m.width != g {
                return Err(hiergen_core::CoreError::field(
                    format!("masks[{i}]"),
                    format!("mask is {}×{}, expected {g}×{g}", m.height, m.width),
                )
                .into());
            }
        }
        Ok(())
    }

    pub fn generate(&self, input: &GenerateInput) -> Result<Generation> {
        let text = input.text.as_deref().filter(|t| !t.trim().is_empty());
        let layout = match (&input.layout, text) {
            (Some(l), _) => {
                l.validate()?;
                if l.class_names != self.box_stage.class_names {
                    return Err(hiergen_core::CoreError::field(
                        "layout.class_names",
                        "class names differ from the loaded model",
                    )
                    .into());
                }
                l.clone()
            }
            (None, Some(t)) => self.sample_layout(t, input.seed)?.layout,
            (None, None) => return Err(hiergen_core::CoreError::EmptyText.into()),
        };
        let masks = match &input.masks {
            Some(m) => {
                self.check_masks(&layout, m)?;
                m.clone()
            }
            None => self.masks_for(&layout, input.seed)?,
        };
        let label_map = self.label_map(&layout, &masks)?;
        let image = self.render(&label_map, text, input.seed)?;
        Ok(Generation {
            layout,
            masks,
            label_map,
            image,
            seed: input.seed,
        })
    }
}
