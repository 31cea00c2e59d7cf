//! Network, training objective and training loop.

pub mod loss;
pub mod network;
pub mod train;

pub use loss::{overall_loss, overall_scalar, FrameTargets, LossBreakdown, LossConfig};
pub use network::{HeadOutputs, LevelOutput, Model, ModelConfig, Network};
pub use train::{load_checkpoint, save_checkpoint, train, OptimizerKind, StepLog, TrainConfig};
