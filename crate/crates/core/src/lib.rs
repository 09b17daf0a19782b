//! Time-distributed VGG features feeding a bidirectional GRU, for
//! classifying short video clips. Tensors, kernels, per-layer gradients,
//! clip ingestion and SGD training are all implemented here.
//!
//! With the default `parallel` feature, frames of a clip and samples of a
//! batch can be processed on a rayon pool (see [`Execution`]). Results are
//! reduced in a fixed order either way.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_check, CheckLoss, GradCheckOptions, GradReport, GradTape, Gradients};
pub use error::{CheckpointError, Error, ErrorClass, Result};
pub use exec::Execution;
pub use model::{ArchDescriptor, Model};
pub use tensor::{Element, Tensor};
