//! Dense linear algebra and the checkpoint container.

pub mod checkpoint;
pub mod groups;
pub mod matrix;
pub mod svd;

pub use checkpoint::{Checkpoint, Tensor, TensorData};
pub use groups::{group_norms, EntryRef, GroupScheme, SchemeKind};
pub use matrix::{matmul, DenseMatrix};
pub use svd::{svd, SvdResult};
