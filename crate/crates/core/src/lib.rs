//! Temperature-scaled softmax classification at desk scale.
//!
//! - [`autodiff`] / [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! - [`softmax`]: temperature softmax, cross-entropy, and closed-form
//!   gradients with respect to prototypes and features.
//! - [`model`]: encoder + prototype-head classifiers and their file format.
//! - [`data`]: seeded blob datasets and the IDX reader.
//! - [`train`]: SGD with cosine annealing, standard and adversarial
//!   training.
//! - [`attack`]: l∞ PGD with CE / C&W-margin / DLR losses, robust accuracy,
//!   and input-gradient decomposition.
//! - [`corrupt`]: parametric common corruptions.
//! - [`geometry`]: prototype distance/similarity analyses and logit shifts.
//! - [`gradcheck`]: the closed-form vs autodiff vs finite-difference suite.
//!
//! Per-sample work can fan out over rayon (the default `parallel` feature);
//! results are identical to sequential execution.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod seed;
pub mod softmax;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
