//! Cloud detection on high-resolution scenes: a multi-branch high-resolution encoder,
//! cascaded decoder with pyramid pooling, teacher/student two-view training, tiling for
//! scene-sized inputs and the saliency-style evaluation measures.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod tiling;
pub mod trainer;

pub use error::{Error, Result};
