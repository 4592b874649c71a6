pub mod adapters;
pub mod autodiff;
pub mod data;
pub mod ddpm;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, TensorNetwork};
