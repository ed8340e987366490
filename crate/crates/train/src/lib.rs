//! Training, checkpointing, evaluation and end-to-end inference for the
//! text → layout → masks → image pipeline.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod run;
pub mod schedule;
pub mod stages;
pub mod trainer;

pub use config::Config;
pub use error::{Result, TrainError};
pub use schedule::StageId;
