//! Temporal dilated convolutional networks with feature-wise attention
//! fusion for binary classification of multivariate visual-feature
//! sequences.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Cue, ModelConfig, Network};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
