pub mod adversary;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod distance;
pub mod error;
pub mod eval;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
