//! From-scratch ViT inference that keeps every intermediate activation, plus
//! the interpretability maps built on top of them.
//!
//! - [`tensor`]: dense `f32` tensors and kernels (matmul, softmax, LayerNorm, GELU)
//! - [`model`]: config, weights, forward pass, [`ActivationTrace`]
//! - [`weights_io`]: JSON manifest + raw blob weight container
//! - [`ingest`]: decoding, resizing and normalizing input images
//! - [`interpret`]: similarity, attention, channel and probe maps as [`HeatGrid`]s
//! - [`graphlayout`]: seeded force-directed layout with label nodes

pub mod error;
pub mod graphlayout;
pub mod ingest;
pub mod interpret;
pub mod model;
pub mod tensor;
pub mod weights_io;

pub use error::{Error, Result};
pub use interpret::HeatGrid;
pub use model::{ActivationTrace, ViTConfig, ViTWeights};
pub use tensor::Tensor;

/// CIFAR-10 class names, the label set of the 10-way head.
pub const CIFAR10_LABELS: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
