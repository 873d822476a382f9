//! The source classifier: parameters, BatchNorm statistics, the reverse pass,
//! Adam, source training and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod params;
pub mod train;

pub use adam::{adam_step, adam_step_selected, AdamState};
pub use checkpoint::Checkpoint;
pub use model::{backward, forward, softmax2, Batch, BnLayerStats, BnMode, BnState, Cache, Logits, Model};
pub use params::{GradSet, LayerKind, ParamSet, Tensor};
pub use train::{cross_entropy, train_source, TrainConfig, TrainLog};
