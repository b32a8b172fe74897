//! Neural-network building blocks for weakly supervised digit recognition:
//! dense tensors, layers with explicit backpropagation, losses, optimizers,
//! MIL/WELDON pooling heads, spatial transformers and MNIST data tooling.

pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod stn;
pub mod tensor;
pub mod wsl;

pub use error::{Error, Result};
pub use tensor::Tensor;
