//! A small convolutional network engine: forward tracing, analytic
//! cross-entropy gradients and SGD training for the classifier and
//! segmenter heads.

pub mod checkpoint;
mod layer;
mod network;
mod train;

pub use layer::{Conv2d, Dense, Layer, LayerKind};
pub(crate) use layer::window_argmax;
pub use network::{
    ActivationTrace, BatchGradient, Gradients, Head, Network, Tap, Target, REFERENCE_WIDTHS,
};
pub use train::{mean_loss, train_classifier, train_segmenter, TrainSchedule};
