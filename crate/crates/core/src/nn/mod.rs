//! Layer zoo, the two network architectures, and supervised training.

pub mod batchnorm;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use batchnorm::{batch_stats, bn_forward, BatchStats, BnLayerStats, BnMode, BnStatsSet};
pub use layers::{Layer, LayerSpec};
pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use model::{forward_classify, Architecture, ForwardPass, Model};
pub use train::{fit, train_supervised, TrainConfig, TrainReport};
