pub mod audio;
pub mod augment;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod export;
pub mod features;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
