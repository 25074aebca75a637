//! Three-channel multi-resolution convolutional network for binary
//! segmentation, implemented from first principles.
//!
//! - [`tensor`]: dense `(height, width, channels)` arrays.
//! - [`layers`]: convolution, transposed convolution, max-pooling,
//!   zero-insertion upsampling and activations, each with a backward pass.
//! - [`model`]: the three-branch network and its parameter set.
//! - [`data`] and [`pnm`]: PGM ingestion, ROI cropping, splitting and
//!   phantom synthesis.
//! - [`loss`], [`optim`], [`train`] and [`checkpoint`]: the training loop and
//!   its persistence.
//! - [`metrics`]: confusion counts, IoU/TPR/PPV, summaries and overlays.

pub mod checkpoint;
pub mod data;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use tensor::{Real, Shape, Tensor, TensorError};
