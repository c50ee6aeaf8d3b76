//! Small CNN with hand-written reverse mode, used as the desk-scale testbed.

pub mod conv;
pub mod data;
pub mod io;
pub mod loss;
pub mod model;
pub mod train;

pub use conv::{Conv, ConvMeta, FeatureMap};
pub use data::{Batch, Dataset, SyntheticConfig};
pub use loss::{cross_entropy, distill_loss, softmax_rows, DistillConfig};
pub use model::{ArchSpec, Block, BlockConfig, ForwardCache, InputShape, Linear, Network, ParamInfo};
pub use train::{evaluate, train, EpochMetrics, LossKind, LrSchedule, TrainConfig};
