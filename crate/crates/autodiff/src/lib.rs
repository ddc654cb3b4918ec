//! Reverse-mode differentiation over the small operator set used by
//! TasNet and uNet: 1-D convolutions, overlap-add synthesis, PReLU,
//! sigmoid, global/cumulative layer normalization, dropout and a few
//! shape operations.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the
//! tape once in reverse. Everything is generic over [`Scalar`] so the same
//! model code runs in `f32` for training and in `f64` for gradient checks.

mod conv;
mod error;
mod gradcheck;
mod graph;
mod norm;
mod scalar;
mod tensor;

pub use conv::{ConvGeometry, Padding};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, Probe};
pub use graph::{CustomBackward, Gradients, Graph, Var};
pub use norm::{NormKind, NORM_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;
