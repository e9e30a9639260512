//! Pixel-wise pseudo labels from noisily tagged images.
//!
//! A classifier trained on image-level tags provides class-specific
//! attention (forward class activation scores fused with top-down excitation
//! maps), which superpixel smoothing and a trimap turn into pseudo masks. A
//! filter cascade removes images whose tag the classifier contradicts, and an
//! online fine-tuning loop grows a cleaner training set for the segmenter.

pub mod attention;
pub mod convnet;
pub mod curation;
pub mod dataset;
pub mod error;
pub mod io;
pub mod pseudo_label;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, LabelImage, IGNORE};
