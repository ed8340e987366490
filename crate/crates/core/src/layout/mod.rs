//! Labeled boxes, their rasterizations and the canonical layout JSON.
//!
//! Coordinates are normalized to `[0, 1]` with `(x, y)` the top-left
//! corner of the box and `(w, h)` its extent. The JSON wire format is
//!
//! ```json
//! {"classes": ["circle", ...], "boxes": [{"x": 0.1, "y": 0.2, "w": 0.3, "h": 0.3, "label": 0}]}
//! ```
//!
//! with keys always emitted in that order.

mod edit;
mod grid;

pub use edit::{apply_layout_edit, LayoutEdit};
pub use grid::{
    aggregate_box_tensors, aggregate_masks, compose_label_map, tensorize_box, BoxTensor, ClassGrid,
    InstanceMask, MaskSum, SemanticLabelMap, DEFAULT_THRESHOLD,
};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Slack allowed on `x + w <= 1` when validating boxes that arrive over the
/// wire, so that a box ending exactly at the border survives float rounding.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: usize,
}

impl BoxSpec {
    pub fn new(x: f64, y: f64, w: f64, h: f64, label: usize) -> Self {
        BoxSpec { x, y, w, h, label }
    }

    /// Horizontal center in normalized coordinates.
    pub fn center_x(&self) -> f64 {
        self.x + 0.5 * self.w
    }

    pub fn center_y(&self) -> f64 {
        self.y + 0.5 * self.h
    }

    /// Clamp into the unit square: origin in `[0,1]`, extent non-negative and
    /// not crossing the right/bottom border. Non-finite values become 0.
    pub fn clamped(&self) -> BoxSpec {
        let fin = |v: f64| if v.is_finite() { v } else { 0.0 };
        let x = fin(self.x).clamp(0.0, 1.0);
        let y = fin(self.y).clamp(0.0, 1.0);
        let w = fin(self.w).clamp(0.0, 1.0 - x);
        let h = fin(self.h).clamp(0.0, 1.0 - y);
        BoxSpec {
            x,
            y,
            w,
            h,
            label: self.label,
        }
    }

    /// Checks the box invariants, reporting the first violation with a field
    /// path rooted at `path` (e.g. `boxes[3]`).
    pub fn validate_at(&self, num_classes: usize, path: &str) -> Result<()> {
        for (name, v) in [("x", self.x), ("y", self.y), ("w", self.w), ("h", self.h)] {
            if !v.is_finite() {
                return Err(CoreError::field(format!("{path}.{name}"), "must be finite"));
            }
        }
        for (name, v) in [("x", self.x), ("y", self.y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::field(
                    format!("{path}.{name}"),
                    format!("{v} outside [0, 1]"),
                ));
            }
        }
        for (name, v) in [("w", self.w), ("h", self.h)] {
            if v < 0.0 {
                return Err(CoreError::field(format!("{path}.{name}"), "must be >= 0"));
            }
        }
        if self.x + self.w > 1.0 + EDGE_SLACK {
            return Err(CoreError::field(format!("{path}.w"), "x + w exceeds 1"));
        }
        if self.y + self.h > 1.0 + EDGE_SLACK {
            return Err(CoreError::field(format!("{path}.h"), "y + h exceeds 1"));
        }
        if self.label >= num_classes {
            return Err(CoreError::field(
                format!("{path}.label"),
                format!("label {} out of range for {num_classes} classes", self.label),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.validate_at(num_classes, "box")
    }
}

/// Ordered labeled boxes plus the class vocabulary they index into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSequence {
    #[serde(rename = "classes")]
    pub class_names: Vec<String>,
    pub boxes: Vec<BoxSpec>,
}

impl LayoutSequence {
    pub fn new(class_names: Vec<String>, boxes: Vec<BoxSpec>) -> Self {
        LayoutSequence { class_names, boxes }
    }

    pub fn empty(class_names: Vec<String>) -> Self {
        LayoutSequence {
            class_names,
            boxes: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.boxes.iter().map(|b| b.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(CoreError::field("classes", "must list at least one class"));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate_at(self.class_names.len(), &format!("boxes[{i}]"))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialization is infallible")
    }

    /// Parses and validates the canonical layout JSON.
    pub fn from_json(s: &str) -> Result<Self> {
        let layout: LayoutSequence = serde_json::from_str(s)?;
        layout.validate()?;
        Ok(layout)
    }

    /// Boxes tensorized onto an `height × width` grid, one tensor per box.
    pub fn box_tensors(&self, height: usize, width: usize) -> Result<Vec<BoxTensor>> {
        self.boxes
            .iter()
            .map(|b| tensorize_box(b, height, width, self.num_classes()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn json_key_order_is_canonical() {
        let l = LayoutSequence::new(classes(), vec![BoxSpec::new(0.1, 0.2, 0.3, 0.4, 1)]);
        assert_eq!(
            l.to_json(),
            r#"{"classes":["a","b","c"],"boxes":[{"x":0.1,"y":0.2,"w":0.3,"h":0.4,"label":1}]}"#
        );
    }

    #[test]
    fn invalid_label_reports_field_path() {
        let s = r#"{"classes":["a","b"],"boxes":[{"x":0.1,"y":0.2,"w":0.3,"h":0.4,"label":0},{"x":0.1,"y":0.2,"w":0.3,"h":0.4,"label":7}]}"#;
        let err = LayoutSequence::from_json(s).unwrap_err();
        assert_eq!(err.field_path(), Some("boxes[1].label"));
    }

    #[test]
    fn out_of_range_origin_rejected() {
        let s = r#"{"classes":["a"],"boxes":[{"x":1.5,"y":0.2,"w":0.0,"h":0.4,"label":0}]}"#;
        let err = LayoutSequence::from_json(s).unwrap_err();
        assert_eq!(err.field_path(), Some("boxes[0].x"));
    }

    #[test]
    fn clamped_keeps_box_inside() {
        let b = BoxSpec::new(0.9, -0.2, 0.5, 2.0, 0).clamped();
        assert_eq!(b.x, 0.9);
        assert_eq!(b.y, 0.0);
        assert!(b.x + b.w <= 1.0);
        assert!(b.y + b.h <= 1.0);
        b.validate(1).unwrap();
    }
}
