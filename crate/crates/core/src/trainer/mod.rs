//! Fully connected training with structured pruning and ternary quantization.

pub mod adam;
pub mod data;
pub mod network;
pub mod norm;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use data::{gaussian_blobs, load_digits, load_idx, Dataset};
pub use network::{
    Activation, FormatPolicy, Gradients, Layer, LayerGradients, LayerSpec, Mode, Network, NormKind,
    Phase,
};
pub use norm::BatchNorm;
pub use train::{
    evaluate, train_float, train_structured, train_structured_with, DeltaRefresh, EpochRecord,
    PlateauDecay, TrainConfig,
};
