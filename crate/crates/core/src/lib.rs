//! Group-sparsity "hinge" compression.
//!
//! A square sparsity-inducing matrix `A` is appended after a convolution with
//! reshaped filter `W`, so the layer computes `X · W · A`. Driving column groups
//! of `A` to zero prunes output filters; driving row groups to zero yields a
//! low-rank decomposition `(W_r, A_r)`. The [`solver`] runs the proximal
//! gradient compression loop and the threshold search, [`compaction`] turns the
//! masked model into a smaller one, and [`net`] is the small CNN used to
//! exercise everything end to end.

pub mod compaction;
pub mod config;
pub mod cost;
pub mod error;
pub mod hinge;
pub mod net;
pub mod pipeline;
pub mod regularizers;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use error::{HingeError, Result};
pub use tensor::{DenseMatrix, GroupScheme};
