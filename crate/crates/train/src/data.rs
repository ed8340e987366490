//! In-memory training data and batch assembly.

use candle_core::{DType, Device, Tensor};
use hiergen_core::data::shapeworld::shapeworld_split;
use hiergen_core::data::{DatasetExample, Split};
use hiergen_core::text::{build_vocab, Vocabulary};
use hiergen_core::{compose_label_map, tensorize_box, BoxSpec, LayoutSequence};
use hiergen_models::nn::resize_bilinear;
use hiergen_models::shapegen::InstanceBatch;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::DataConfig;
use crate::error::{Result, TrainError};

/// One scene with everything the trainers consume precomputed.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: u64,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub layout: LayoutSequence,
    /// Ground-truth masks, `grid × grid` each, row-major.
    pub masks: Vec<Vec<f32>>,
    /// Channel-major `L × grid × grid` label map composed from `masks`.
    pub label_map: Vec<f32>,
    /// `3 × grid × grid` image in `[−1, 1]`.
    pub image: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
    pub class_names: Vec<String>,
    pub grid: usize,
}

impl SceneSet {
    /// Converts dataset examples, encoding the first caption with `vocab`.
    pub fn from_examples(examples: &[DatasetExample], vocab: &Vocabulary) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| TrainError::config("dataset is empty"))?;
        let class_names = first.layout.class_names.clone();
        let grid = first.image.height;
        let l = class_names.len();
        let mut scenes = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.image.height != grid || ex.image.width != grid {
                return Err(TrainError::config(format!(
                    "example {} is {}×{}, expected {grid}×{grid}",
                    ex.id, ex.image.height, ex.image.width
                )));
            }
            if ex.layout.class_names != class_names {
                return Err(TrainError::config(format!("example {} has different classes", ex.id)));
            }
            if ex.instance_masks.iter().any(|m| m.height != grid || m.width != grid) {
                return Err(TrainError::config(format!("example {} has off-grid masks", ex.id)));
            }
            let caption = ex
                .captions
                .first()
                .ok_or_else(|| TrainError::config(format!("example {} has no caption", ex.id)))?
                .clone();
            let label_map = compose_label_map(
                &ex.instance_masks,
                &ex.layout.labels(),
                l,
                grid,
                grid,
                hiergen_core::DEFAULT_THRESHOLD,
            )?;
            scenes.push(Scene {
                id: ex.id,
                tokens: vocab.encode(&caption)?,
                caption,
                layout: ex.layout.clone(),
                masks: ex.instance_masks.iter().map(|m| m.data.clone()).collect(),
                label_map: label_map.to_f32(),
                image: ex.image.to_chw(),
            });
        }
        Ok(SceneSet {
            scenes,
            class_names,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> SceneSet {
        SceneSet {
            scenes: idx.iter().map(|&i| self.scenes[i].clone()).collect(),
            class_names: self.class_names.clone(),
            grid: self.grid,
        }
    }

    pub fn tokens(&self, idx: &[usize]) -> Vec<Vec<usize>> {
        idx.iter().map(|&i| self.scenes[i].tokens.clone()).collect()
    }

    pub fn layouts(&self, idx: &[usize]) -> Vec<&LayoutSequence> {
        idx.iter().map(|&i| &self.scenes[i].layout).collect()
    }

    pub fn instance_batch(&self, idx: &[usize], dtype: DType) -> Result<InstanceBatch> {
        let l = self.num_classes();
        let g = self.grid;
        let scenes = idx
            .iter()
            .map(|&i| box_tensors(&self.scenes[i].layout.boxes, l, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceBatch::from_scenes(&scenes, l, g, dtype)?)
    }

    /// Ground-truth masks padded to `(N, T, G, G)`.
    pub fn mask_batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let g = self.grid;
        let t = idx.iter().map(|&i| self.scenes[i].masks.len()).max().unwrap_or(0);
        let mut v = vec![0f32; idx.len() * t * g * g];
        for (n, &i) in idx.iter().enumerate() {
            for (j, m) in self.scenes[i].masks.iter().enumerate() {
                let off = (n * t + j) * g * g;
                v[off..off + g * g].copy_from_slice(m);
            }
        }
        Ok(Tensor::from_vec(v, (idx.len(), t, g, g), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn label_maps(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let (l, g) = (self.num_classes(), self.grid);
        let v: Vec<f32> = idx.iter().flat_map(|&i| self.scenes[i].label_map.iter().copied()).collect();
        Ok(Tensor::from_vec(v, (idx.len(), l, g, g), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Pixel-wise maximum of each scene's box tensors, `(N, L, G, G)`.
    pub fn box_maps(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let (l, g) = (self.num_classes(), self.grid);
        let mut v = Vec::with_capacity(idx.len() * l * g * g);
        for &i in idx {
            let tensors = self.scenes[i]
                .layout
                .boxes
                .iter()
                .map(|b| tensorize_box(b, g, g, l))
                .collect::<hiergen_core::Result<Vec<_>>>()?;
            v.extend(hiergen_core::aggregate_box_tensors(&tensors)?.to_f32());
        }
        Ok(Tensor::from_vec(v, (idx.len(), l, g, g), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn images(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let g = self.grid;
        let v: Vec<f32> = idx.iter().flat_map(|&i| self.scenes[i].image.iter().copied()).collect();
        Ok(Tensor::from_vec(v, (idx.len(), 3, g, g), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Flat `L·G·G` box tensors for a list of boxes.
pub fn box_tensors(boxes: &[BoxSpec], num_classes: usize, grid: usize) -> Result<Vec<Vec<f32>>> {
    boxes
        .iter()
        .map(|b| Ok(tensorize_box(b, grid, grid, num_classes)?.to_f32()))
        .collect()
}

/// Train and validation scenes plus the vocabulary built from training
/// captions.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: SceneSet,
    pub val: SceneSet,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn shapeworld(config: &DataConfig) -> Result<Self> {
        let train = shapeworld_split(&config.shapeworld, Split::Train, config.train_count);
        let val = shapeworld_split(&config.shapeworld, Split::Val, config.val_count.max(1));
        Corpus::from_examples(&train, &val, config.min_freq)
    }

    pub fn from_examples(
        train: &[DatasetExample],
        val: &[DatasetExample],
        min_freq: usize,
    ) -> Result<Self> {
        let captions: Vec<&str> = train
            .iter()
            .flat_map(|e| e.captions.iter().map(String::as_str))
            .collect();
        let vocab = build_vocab(&captions, min_freq)?;
        Ok(Corpus {
            train: SceneSet::from_examples(train, &vocab)?,
            val: SceneSet::from_examples(val, &vocab)?,
            vocab,
        })
    }
}

/// Shuffled minibatches of indices `0..n`; the last batch may be short.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Standard-normal tensor drawn from `rng`.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| rand_distr::Distribution::<f32>::sample(&rand_distr::StandardNormal, rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pixel bounds `[start, end)` of a box along an axis of `n` cells; at least
/// one cell.
pub fn pixel_span(start: f64, extent: f64, n: usize) -> (usize, usize) {
    let a = ((start * n as f64).floor().max(0.0) as usize).min(n - 1);
    let b = (((start + extent) * n as f64).ceil() as usize).clamp(a + 1, n);
    (a, b)
}

/// Crops the box region from `(3, G, G)` images and resizes each crop to
/// `size × size`; returns `(M, 3, size, size)`.
pub fn crop_objects(images: &[(Tensor, BoxSpec)], size: usize) -> Result<Tensor> {
    let crops = images
        .iter()
        .map(|(img, b)| {
            let (_, h, w) = img.dims3()?;
            let (i0, i1) = pixel_span(b.y, b.h, h);
            let (j0, j1) = pixel_span(b.x, b.w, w);
            let crop = img.narrow(1, i0, i1 - i0)?.narrow(2, j0, j1 - j0)?.unsqueeze(0)?;
            Ok(resize_bilinear(&crop, size, size)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&crops, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiergen_core::data::shapeworld::ShapeWorldConfig;
    use rand::SeedableRng;

    fn corpus() -> Corpus {
        let config = DataConfig {
            shapeworld: ShapeWorldConfig {
                image_size: 16,
                ..ShapeWorldConfig::default()
            },
            train_count: 6,
            val_count: 2,
            min_freq: 1,
        };
        Corpus::shapeworld(&config).unwrap()
    }

    #[test]
    fn batches_have_consistent_shapes() {
        let c = corpus();
        let idx = [0, 1, 2];
        let t = idx.iter().map(|&i| c.train.scenes[i].layout.len()).max().unwrap();
        let ib = c.train.instance_batch(&idx, DType::F32).unwrap();
        assert_eq!(ib.dims().unwrap(), (3, t, 6, 16));
        assert_eq!(c.train.mask_batch(&idx, DType::F32).unwrap().dims(), &[3, t, 16, 16]);
        assert_eq!(c.train.label_maps(&idx, DType::F32).unwrap().dims(), &[3, 6, 16, 16]);
        assert_eq!(c.train.images(&idx, DType::F32).unwrap().dims(), &[3, 3, 16, 16]);
        assert_eq!(c.val.len(), 2);
    }

    #[test]
    fn minibatches_partition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = minibatches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn crops_cover_box() {
        assert_eq!(pixel_span(0.25, 0.5, 8), (2, 6));
        assert_eq!(pixel_span(0.99, 0.0, 8), (7, 8));
        let img = Tensor::arange(0f32, 48.0, &Device::Cpu).unwrap().reshape((3, 4, 4)).unwrap();
        let c = crop_objects(&[(img, BoxSpec::new(0.5, 0.5, 0.5, 0.5, 0))], 2).unwrap();
        assert_eq!(c.dims(), &[1, 3, 2, 2]);
        assert_eq!(
            c.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![10.0, 11.0], vec![14.0, 15.0]]
        );
    }
}
