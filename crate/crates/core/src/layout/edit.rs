use serde::{Deserialize, Serialize};

use super::{BoxSpec, LayoutSequence};
use crate::error::{CoreError, Result};

/// A single what-if edit on a layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutEdit {
    Add { #[serde(rename = "box")] spec: BoxSpec },
    Remove { index: usize },
    Move { index: usize, dx: f64, dy: f64 },
    Resize { index: usize, dw: f64, dh: f64 },
    Relabel { index: usize, label: usize },
}

/// Returns a new layout with `edit` applied; the input is left untouched.
/// Every resulting box is clamped into the unit square.
pub fn apply_layout_edit(layout: &LayoutSequence, edit: &LayoutEdit) -> Result<LayoutSequence> {
    let mut out = layout.clone();
    let len = out.boxes.len();
    let check = |index: usize| {
        if index < len {
            Ok(index)
        } else {
            Err(CoreError::IndexOutOfRange { index, len })
        }
    };
    let num_classes = out.num_classes();
    let check_label = |label: usize| {
        if label < num_classes {
            Ok(())
        } else {
            Err(CoreError::InvalidLabel { label, num_classes })
        }
    };
    match *edit {
        LayoutEdit::Add { spec } => {
            check_label(spec.label)?;
            out.boxes.push(spec.clamped());
        }
        LayoutEdit::Remove { index } => {
            out.boxes.remove(check(index)?);
        }
        LayoutEdit::Move { index, dx, dy } => {
            let b = &mut out.boxes[check(index)?];
            // Moving keeps the extent; the origin slides until the box fits.
            b.x = (b.x + dx).clamp(0.0, (1.0 - b.w).max(0.0));
            b.y = (b.y + dy).clamp(0.0, (1.0 - b.h).max(0.0));
            *b = b.clamped();
        }
        LayoutEdit::Resize { index, dw, dh } => {
            let b = &mut out.boxes[check(index)?];
            b.w += dw;
            b.h += dh;
            *b = b.clamped();
        }
        LayoutEdit::Relabel { index, label } => {
            let i = check(index)?;
            check_label(label)?;
            out.boxes[i].label = label;
        }
    }
    Ok(out)
}
