pub mod activations;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod petl;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
