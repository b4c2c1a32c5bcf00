//! 3D segmentation network combining a convolutional U-Net with spline
//! function layers (KAN) in the bottleneck, attention-based skip fusion,
//! and the training/evaluation machinery around it: a from-scratch
//! reverse-mode autodiff tape, losses, metrics, synthetic data, NIfTI I/O,
//! and an AdamW optimizer with checkpointing.
//!
//! Everything is dense row-major CPU compute, generic over f32 (training)
//! and f64 (numerical verification).

pub mod attention;
pub mod augment;
pub mod error;
pub mod kan;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod ops;
pub mod param;
pub mod phantom;
pub mod pyramid;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradientMap, Tape};
pub use tensor::{DType, Element, Tensor};
