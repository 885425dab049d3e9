//! CNN-GRU sequence classifiers trained with hand-written backpropagation.

mod checkpoint;
pub mod layers;
mod network;
mod spec;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use network::{argmax, Network};
pub use spec::{LayerSpec, NetworkSpec};
pub use train::{
    ensemble_average, evaluate_loss, predict_all, train, Augment, Ensemble, EpochStats, Optimizer,
    Sample, Split, TrainConfig, TrainReport,
};
