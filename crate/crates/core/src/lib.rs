pub mod depth;
pub mod diagnostics;
pub mod error;
pub mod events;
pub mod model;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
