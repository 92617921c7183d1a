pub mod autograd;
pub mod error;
pub mod estimator2d;
pub mod evalmetrics;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod lifter3d;
pub mod nn;
pub mod nnops;
pub mod refiner;
pub mod synthio;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
