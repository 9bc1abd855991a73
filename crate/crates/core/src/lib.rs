//! Turn-signal intent classification from short vehicle video crops: an
//! attention mask, a convolutional backbone, a ConvLSTM stack and four
//! softmax heads, trained on a synthetic blinking-light generator.

pub mod checkpoint;
pub mod config;
pub mod convlstm;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod semantics;
pub mod training;

pub use error::{Error, Result};
pub use params::{ParamStore, ParamVars};
