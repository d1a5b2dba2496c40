//! Network building blocks: dual-path batch normalization, the
//! temporal-shift video classifier, momentum SGD and checkpoints.

mod batchnorm;
mod checkpoint;
mod model;
mod optim;

pub use batchnorm::{BnStats, DualBatchNorm, Mode, NormPath};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC_PREFIX};
pub use model::{cross_entropy, Bindings, ConvBlock, ForwardOutput, ModelConfig, VideoModel};
pub use optim::{sgd_step, Sgd};
