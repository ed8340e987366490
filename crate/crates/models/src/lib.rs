//! Neural networks for the three generation stages and the frozen feature
//! extractor used for perceptual losses and evaluation.

pub mod adam;
pub mod boxgen;
pub mod error;
pub mod gan;
pub mod imagegen;
pub mod nn;
pub mod params;
pub mod perceptual;
pub mod shapegen;
pub mod text;

pub use adam::{Adam, AdamConfig};
pub use error::{ModelError, Result};
pub use params::{Init, ParamStore};
