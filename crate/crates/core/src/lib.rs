pub mod admm;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod model;
pub mod nas;
pub mod quant;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
