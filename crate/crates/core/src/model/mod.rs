//! ViT configuration, parameters, forward pass and activation trace.

mod config;
mod forward;
mod trace;
mod weights;

pub use config::{ViTConfig, DEFAULT_LAYER_NORM_EPS};
pub use forward::{
    assemble_embedding, classify_head, encoder_block, forward, multi_head_attention, patch_embed,
    AttentionOutput,
};
pub use trace::{ActivationTrace, BlockTrace};
pub use weights::{parameter_specs, BlockWeights, LayerNormParams, Linear, ViTWeights};
