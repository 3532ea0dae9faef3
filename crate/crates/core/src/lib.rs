//! Rib-lesion classification on synthetic bone-scan phantoms: a small CNN
//! stack with explicit backpropagation, transfer-learning trainer, class
//! activation heatmaps and evaluation statistics.

pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Scalar, Tensor};
