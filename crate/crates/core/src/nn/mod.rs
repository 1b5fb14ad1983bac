//! A small batch-level autodiff engine and the two architectures built on it.

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{cross_entropy, Layer, Param};
pub use model::{build_mini_cnn, build_toy_vit, Architecture, Model, ViTConfig};
pub use optim::{Optimizer, OptimizerKind, TrainConfig};
pub use tensor::Tensor;
pub use train::{train, EpochStats, History, Trainer};
