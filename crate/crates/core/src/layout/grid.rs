use serde::{Deserialize, Serialize};

use super::BoxSpec;
use crate::error::{CoreError, Result};

/// Mask value at or above which a pixel counts as covered.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Binary `height × width × channels` grid, stored channel-major so that a
/// channel is a contiguous `height × width` plane.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Rasterization of one labeled box (or the max over several).
pub type BoxTensor = ClassGrid;
/// Per-class union of binarized instance masks.
pub type SemanticLabelMap = ClassGrid;

impl ClassGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ClassGrid {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.height + i) * self.width + j
    }

    /// Value at row `i`, column `j`, channel `k`.
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u8) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn channel(&self, k: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Spatial occupancy: 1 where any channel is set.
    pub fn occupancy(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = vec![0u8; n];
        for k in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(self.channel(k)) {
                *o |= v;
            }
        }
        out
    }

    /// Channel-major values as `f32`, ready to become a `C×H×W` tensor.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Per-instance soft mask with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl InstanceMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        InstanceMask {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "mask data has {} values, expected {}×{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(CoreError::ShapeMismatch(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(InstanceMask {
            height,
            width,
            data,
        })
    }

    pub fn from_binary(height: usize, width: usize, bits: &[u8]) -> Self {
        InstanceMask {
            height,
            width,
            data: bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.width + j]
    }

    pub fn binarize(&self, threshold: f32) -> Vec<u8> {
        self.data.iter().map(|&v| (v >= threshold) as u8).collect()
    }
}

/// Elementwise sum of instance masks; may exceed 1 where instances overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Rasterizes a labeled box onto an `height × width × num_classes` grid.
///
/// A cell is set when its center lies in the half-open box
/// `[x, x+w) × [y, y+h)`. A box that covers no cell center still marks the
/// cell containing its origin, so every instance occupies at least one cell.
pub fn tensorize_box(
    b: &BoxSpec,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<BoxTensor> {
    if b.label >= num_classes {
        return Err(CoreError::InvalidLabel {
            label: b.label,
            num_classes,
        });
    }
    if height == 0 || width == 0 {
        return Err(CoreError::ShapeMismatch("grid must be at least 1×1".into()));
    }
    let mut grid = ClassGrid::zeros(num_classes, height, width);
    let cols = covered_range(b.x, b.w, width);
    let rows = covered_range(b.y, b.h, height);
    match (rows, cols) {
        (Some((r0, r1)), Some((c0, c1))) => {
            for i in r0..r1 {
                for j in c0..c1 {
                    grid.set(i, j, b.label, 1);
                }
            }
        }
        _ => {
            let i = origin_cell(b.y, height);
            let j = origin_cell(b.x, width);
            grid.set(i, j, b.label, 1);
        }
    }
    Ok(grid)
}

/// Cells `[lo, hi)` whose centers `(c + 0.5) / n` fall in `[start, start+len)`.
fn covered_range(start: f64, len: f64, n: usize) -> Option<(usize, usize)> {
    let end = start + len;
    let inside = |c: usize| {
        let center = (c as f64 + 0.5) / n as f64;
        center >= start && center < end
    };
    let lo = (0..n).find(|&c| inside(c))?;
    let hi = (lo..n).find(|&c| !inside(c)).unwrap_or(n);
    Some((lo, hi))
}

fn origin_cell(start: f64, n: usize) -> usize {
    ((start * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Pixel-wise maximum over box tensors of identical shape.
pub fn aggregate_box_tensors(tensors: &[BoxTensor]) -> Result<BoxTensor> {
    let first = tensors.first().ok_or(CoreError::Empty("box tensors"))?;
    let mut out = first.clone();
    for t in &tensors[1..] {
        if t.shape() != first.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "box tensor shape {:?} differs from {:?}",
                t.shape(),
                first.shape()
            )));
        }
        for (o, &v) in out.data.iter_mut().zip(&t.data) {
            *o = (*o).max(v);
        }
    }
    Ok(out)
}

/// Elementwise sum of instance masks.
pub fn aggregate_masks(masks: &[InstanceMask]) -> Result<MaskSum> {
    let first = masks.first().ok_or(CoreError::Empty("instance masks"))?;
    let mut data = vec![0.0f32; first.data.len()];
    for m in masks {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(CoreError::ShapeMismatch(format!(
                "mask {}×{} differs from {}×{}",
                m.height, m.width, first.height, first.width
            )));
        }
        for (o, &v) in data.iter_mut().zip(&m.data) {
            *o += v;
        }
    }
    Ok(MaskSum {
        height: first.height,
        width: first.width,
        data,
    })
}

/// Composes instance masks into a semantic label map: channel `k` at a pixel
/// is 1 iff some class-`k` instance has mask value `>= threshold` there.
///
/// An empty instance list yields an all-zero map of the given shape.
pub fn compose_label_map(
    masks: &[InstanceMask],
    labels: &[usize],
    num_classes: usize,
    height: usize,
    width: usize,
    threshold: f32,
) -> Result<SemanticLabelMap> {
    if masks.len() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} masks but {} labels",
            masks.len(),
            labels.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CoreError::InvalidThreshold(threshold));
    }
    let mut out = ClassGrid::zeros(num_classes, height, width);
    let plane = height * width;
    for (m, &label) in masks.iter().zip(labels) {
        if label >= num_classes {
            return Err(CoreError::InvalidLabel { label, num_classes });
        }
        if (m.height, m.width) != (height, width) {
            return Err(CoreError::ShapeMismatch(format!(
                "mask {}×{} does not match grid {}×{}",
                m.height, m.width, height, width
            )));
        }
        let dst = &mut out.data[label * plane..(label + 1) * plane];
        for (o, &v) in dst.iter_mut().zip(&m.data) {
            if v >= threshold {
                *o = 1;
            }
        }
    }
    Ok(out)
}
