pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod flowops;
pub mod graph;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape4, Tensor4};
