//! Training examples: procedural shape-world scenes and COCO-format ingestion.

pub mod caption;
pub mod coco;
pub mod shapeworld;
pub mod store;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::imageio::Image;
use crate::layout::{InstanceMask, LayoutSequence};

/// One scene: image, captions, labeled boxes and per-instance masks, with
/// instances ordered left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExample {
    pub id: u64,
    pub image: Image,
    pub captions: Vec<String>,
    pub layout: LayoutSequence,
    pub instance_masks: Vec<InstanceMask>,
}

impl DatasetExample {
    pub fn num_objects(&self) -> usize {
        self.layout.len()
    }

    /// Stable content hash over every field.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.feed(&mut h);
        h.finalize().into()
    }

    fn feed(&self, h: &mut Sha256) {
        h.update(self.id.to_le_bytes());
        h.update((self.image.height as u64).to_le_bytes());
        h.update((self.image.width as u64).to_le_bytes());
        for v in &self.image.data {
            h.update(v.to_le_bytes());
        }
        for c in &self.captions {
            h.update((c.len() as u64).to_le_bytes());
            h.update(c.as_bytes());
        }
        h.update(self.layout.to_json().as_bytes());
        for m in &self.instance_masks {
            h.update((m.height as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
    }
}

/// Hex digest of a sequence of examples, order-sensitive.
pub fn dataset_digest<'a>(examples: impl IntoIterator<Item = &'a DatasetExample>) -> String {
    let mut h = Sha256::new();
    for ex in examples {
        h.update(ex.digest());
    }
    hex::encode(h.finalize())
}

/// Sorts instances left to right by box `x`, breaking ties by `y` and then by
/// label. The sort is stable, so fully tied instances keep their input order.
pub fn order_instances(
    layout: &LayoutSequence,
    masks: &[InstanceMask],
) -> Result<(LayoutSequence, Vec<InstanceMask>)> {
    if layout.len() != masks.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} boxes but {} masks",
            layout.len(),
            masks.len()
        )));
    }
    let order = instance_order(layout);
    let boxes = order.iter().map(|&i| layout.boxes[i]).collect();
    let masks = order.iter().map(|&i| masks[i].clone()).collect();
    Ok((LayoutSequence::new(layout.class_names.clone(), boxes), masks))
}

/// Permutation that `order_instances` applies.
pub fn instance_order(layout: &LayoutSequence) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..layout.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&layout.boxes[a], &layout.boxes[b]);
        p.x.total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.label.cmp(&q.label))
    });
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Deterministic split assignment from a hash of `(seed, index)`; one in five
/// indices goes to validation.
pub fn split_of(seed: u64, index: u64) -> Split {
    let mut h = Sha256::new();
    h.update(b"split");
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    if d[0] % 5 == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

/// The first `count` indices (in increasing order) assigned to `split`.
pub fn split_indices(seed: u64, split: Split, count: usize) -> Vec<u64> {
    (0u64..)
        .filter(|&i| split_of(seed, i) == split)
        .take(count)
        .collect()
}
