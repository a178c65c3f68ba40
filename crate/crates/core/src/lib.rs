//! Road segmentation with dense depthwise dilated separable pyramid pooling.
//!
//! A self-contained CPU implementation: NCHW tensors with reverse-mode
//! autodiff, the convolution family (dilated, depthwise, pointwise,
//! separable), the ASPP baseline and the dense separable cascade, squeeze and
//! excitation, a miniature Xception-style encoder-decoder, training with Adam
//! and exponential learning-rate decay, segmentation metrics, tiling, and an
//! operation-count profiler.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod param;
pub mod pyramid;
pub mod se;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Shape, Tensor};
