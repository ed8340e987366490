//! Layout data model and dataset ingestion for the hierarchical
//! text → boxes → masks → image pipeline.
//!
//! Everything in this crate is deterministic and free of neural-network
//! dependencies: box rasterization, mask aggregation, label-map
//! composition, layout editing, run-length mask encoding, the
//! procedural shape-world dataset and a COCO-format loader.

pub mod data;
pub mod error;
pub mod imageio;
pub mod layout;
pub mod rle;
pub mod text;

pub use error::{CoreError, Result};
pub use layout::{
    aggregate_box_tensors, aggregate_masks, apply_layout_edit, compose_label_map, tensorize_box,
    BoxSpec, BoxTensor, ClassGrid, InstanceMask, LayoutEdit, LayoutSequence, MaskSum,
    SemanticLabelMap, DEFAULT_THRESHOLD,
};
pub use rle::Rle;
