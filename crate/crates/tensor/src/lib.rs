//! Dense tensors with a reverse-mode gradient tape, and the convolutional and
//! recurrent building blocks trained on it.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! replays the adjoints in reverse. `f32` is the training precision and `f64`
//! is used for finite-difference gradient checks.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod init;
mod ops;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use ops::{conv_output_extent, Activation, ConvGeometry, ConvOptions, Padding};
pub use rng::{splitmix64, RngStream};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
