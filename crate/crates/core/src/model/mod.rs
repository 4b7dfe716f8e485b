//! A small ViT with binarized linear layers, GSB or baseline binary
//! attention, hand-written backward passes, and the two-stage trainer.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod layers;
pub mod loss;
pub mod mhsa;
pub mod mlp;
pub mod optim;
pub mod train;
pub mod vit;

pub use checkpoint::Checkpoint;
pub use config::{AttnMode, DistillConfig, ModelConfig, Stage};
pub use data::Dataset;
pub use train::{evaluate, two_stage_train, EpochMetrics, Schedule};
pub use vit::{Vit, VitOutput};
