//! Minimal differentiable computation for the window recognizer.
//!
//! Values live in row-major [`Tensor`]s. A [`Tape`] records one forward
//! pass and replays it backwards to produce exact gradients for every
//! registered parameter. [`model`] builds the feature extractor, the two
//! linear heads and the image generator on top of it, and [`Adam`] updates
//! a [`ParameterStore`] in place.

pub mod adam;
pub mod error;
pub mod functional;
mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NnError, Result};
pub use functional::{log_sum_exp, real_probability, softmax};
pub use layers::{BatchNormStats, NormSource};
pub use losses::DiscriminatorLoss;
pub use params::RunningUpdate;
pub use params::{Group, ParamKind, ParameterStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
