//! Procedural shape-world scenes: colored geometric objects on flat or
//! striped backgrounds, each with a caption from the template grammar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{BackgroundStyle, CaptionFacts, Region, SHAPE_NAMES};
use super::{order_instances, split_indices, DatasetExample, Split};
use crate::error::{CoreError, Result};
use crate::imageio::Image;
use crate::layout::{BoxSpec, InstanceMask, LayoutSequence};

const OBJECT_RGB: [[f32; 3]; 6] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.60, 0.20, 0.80],
    [1.00, 0.55, 0.00],
];
const BACKGROUND_RGB: [[f32; 3]; 3] = [[0.50, 0.50, 0.50], [0.95, 0.95, 0.95], [0.08, 0.08, 0.08]];

/// Caption grammar understood by [`super::caption::parse_caption`].
pub const GRAMMAR_GROUPS_V1: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeWorldConfig {
    /// Side of the square image and of the mask grid.
    pub image_size: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Number of object colors drawn from the fixed palette.
    pub num_colors: usize,
    pub grammar: u32,
    pub min_extent: f64,
    pub max_extent: f64,
    pub seed: u64,
}

impl Default for ShapeWorldConfig {
    fn default() -> Self {
        ShapeWorldConfig {
            image_size: 64,
            max_objects: 4,
            num_classes: 6,
            num_colors: 6,
            grammar: GRAMMAR_GROUPS_V1,
            min_extent: 0.2,
            max_extent: 0.4,
            seed: 0,
        }
    }
}

impl ShapeWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: &str| Err(CoreError::field(f, r));
        if self.max_objects < 1 || self.max_objects > 9 {
            return err("max_objects", "must be in 1..=9");
        }
        if self.num_classes < 2 || self.num_classes > SHAPE_NAMES.len() {
            return err("num_classes", "must be in 2..=6");
        }
        if self.num_colors < 1 || self.num_colors > OBJECT_RGB.len() {
            return err("num_colors", "must be in 1..=6");
        }
        if self.image_size < 8 {
            return err("image_size", "must be at least 8");
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 0.9)
        {
            return err("min_extent", "need 0 < min_extent <= max_extent <= 0.9");
        }
        if self.grammar != GRAMMAR_GROUPS_V1 {
            return err("grammar", "unknown grammar id");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Does the shape of class `shape` drawn in `b` cover the normalized point
/// `(u, v)`? Points outside the half-open box never do.
pub fn shape_contains(shape: usize, b: &BoxSpec, u: f64, v: f64) -> bool {
    if !(u >= b.x && u < b.x + b.w && v >= b.y && v < b.y + b.h) {
        return false;
    }
    let p = (u - b.x) / b.w - 0.5;
    let q = (v - b.y) / b.h - 0.5;
    match shape {
        0 => p * p + q * q <= 0.25,
        1 => true,
        // apex at the top center, base along the bottom edge
        2 => p.abs() <= (q + 0.5) / 2.0,
        3 => p.abs() + q.abs() <= 0.5,
        4 => p.abs() <= 1.0 / 6.0 || q.abs() <= 1.0 / 6.0,
        5 => {
            let r2 = p * p + q * q;
            (0.09..=0.25).contains(&r2)
        }
        _ => false,
    }
}

struct SceneObject {
    spec: BoxSpec,
    color: usize,
}

fn overlap_fraction(a: &BoxSpec, b: &BoxSpec) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    ix * iy / (a.w * a.h).min(b.w * b.h)
}

fn sample_objects(config: &ShapeWorldConfig, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let count = rng.random_range(1..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = rng.random_range(0..config.num_classes);
        let color = rng.random_range(0..config.num_colors);
        let mut candidate = BoxSpec::new(0.0, 0.0, 0.0, 0.0, shape);
        for _attempt in 0..40 {
            let w = rng.random_range(config.min_extent..=config.max_extent);
            let h = (w * rng.random_range(0.8..=1.25)).min(config.max_extent);
            let x = rng.random_range(0.0..=1.0 - w);
            let y = rng.random_range(0.0..=1.0 - h);
            candidate = BoxSpec::new(x, y, w, h, shape);
            if objects
                .iter()
                .all(|o| overlap_fraction(&o.spec, &candidate) < 0.15)
            {
                break;
            }
        }
        objects.push(SceneObject {
            spec: candidate,
            color,
        });
    }
    objects
}

fn random_u64(rng: &mut ChaCha8Rng) -> u64 {
    rng.random()
}

/// Generates scene `index`; a pure function of `(config, index)`.
pub fn generate_shapeworld(config: &ShapeWorldConfig, index: u64) -> DatasetExample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    // burn one value so that stream 0 does not alias the seed-only generator
    let _ = random_u64(&mut rng);

    let objects = sample_objects(config, &mut rng);
    let style = if rng.random_bool(0.5) {
        BackgroundStyle::Flat
    } else {
        BackgroundStyle::Striped
    };
    let background = rng.random_range(0..BACKGROUND_RGB.len());

    let n = config.image_size;
    let bg = BACKGROUND_RGB[background];
    let stripe_bg = bg.map(|c| 0.6 * c + 0.2);
    let stripe = (n / 8).max(1);
    let mut image = Image::filled(n, n, [0.0; 3]);
    let mut masks: Vec<InstanceMask> = objects.iter().map(|_| InstanceMask::zeros(n, n)).collect();
    for i in 0..n {
        let v = (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let u = (j as f64 + 0.5) / n as f64;
            let mut rgb = match style {
                BackgroundStyle::Striped if (i / stripe) % 2 == 1 => stripe_bg,
                _ => bg,
            };
            for (t, o) in objects.iter().enumerate() {
                if shape_contains(o.spec.label, &o.spec, u, v) {
                    rgb = OBJECT_RGB[o.color];
                    masks[t].data[i * n + j] = 1.0;
                }
            }
            image.put(i, j, rgb.map(|c| c * 2.0 - 1.0));
        }
    }

    let facts = CaptionFacts::from_objects(
        &objects
            .iter()
            .map(|o| (Region::of(o.spec.center_x()), o.spec.label, o.color))
            .collect::<Vec<_>>(),
        style,
        background,
    );
    let layout = LayoutSequence::new(
        config.class_names(),
        objects.iter().map(|o| o.spec).collect(),
    );
    let (layout, instance_masks) =
        order_instances(&layout, &masks).expect("one mask per generated object");
    DatasetExample {
        id: index,
        image,
        captions: vec![facts.render()],
        layout,
        instance_masks,
    }
}

/// The first `count` scenes of `split`.
pub fn shapeworld_split(config: &ShapeWorldConfig, split: Split, count: usize) -> Vec<DatasetExample> {
    split_indices(config.seed, split, count)
        .into_iter()
        .map(|i| generate_shapeworld(config, i))
        .collect()
}
