pub mod baselines;
pub mod curves;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod hydrology;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
