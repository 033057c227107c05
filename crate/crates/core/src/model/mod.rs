//! Conditional diffusion transformer over command windows.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod net;
pub mod params;
pub mod real;
pub mod sampler;
pub mod schedule;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{make_variant, Head, ModelConfig, Variant, POSE_DIM};
pub use loss::{class_weights, losses, LossValue, LossWeights};
pub use net::{BatchInput, BatchOutput, Network};
pub use params::ParamStore;
pub use sampler::{CommandModel, Conditioning, ConditionTokens, ConstantModel, ModelOutput, TrainedModel};
pub use schedule::{make_schedule, q_sample, DiffusionSchedule};
