//! Dual-extractor graph convolution regressor for per-node communication distance.

pub mod gradcheck;
pub mod model;
pub mod params;
pub mod train;

pub use model::{backward, data_loss, forward, gcn_layer, loss, predict, ForwardCache};
pub use params::{
    load_params, save_params, Gradients, ModelParameters, ModelShape, DEFAULT_HIDDEN, TENSOR_NAMES,
};
pub use train::{evaluate, train, train_with_progress, EpochRecord, Hyperparameters, Optimizer, TrainReport};
