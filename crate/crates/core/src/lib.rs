pub mod bottleneck;
pub mod data;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod swin;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
