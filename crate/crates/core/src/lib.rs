//! Layered recursive generative adversarial networks on a small
//! define-by-run autodiff engine.
//!
//! Images are generated as a background plus recursively pasted foreground
//! layers, each described by an appearance, a soft mask and an affine pose.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod stn;
pub mod tensor;
pub mod training;
pub mod variants;

pub use autodiff::{Graph, ParamStore, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
