use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intermediates of one encoder block. `T` is the token count, `H` the head count.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub(crate) attn_input: Tensor,
    pub(crate) query: Tensor,
    pub(crate) key: Tensor,
    pub(crate) value: Tensor,
    pub(crate) attention: Tensor,
    pub(crate) msa_out: Tensor,
    pub(crate) residual: Tensor,
    pub(crate) mlp_input: Tensor,
    pub(crate) mlp_hidden: Tensor,
    pub(crate) output: Tensor,
}

impl BlockTrace {
    /// LayerNorm output fed to attention, `[T, D]`.
    pub fn attn_input(&self) -> &Tensor {
        &self.attn_input
    }

    /// Per-head queries, `[H, T, d_k]`.
    pub fn query(&self) -> &Tensor {
        &self.query
    }

    /// Per-head keys, `[H, T, d_k]`.
    pub fn key(&self) -> &Tensor {
        &self.key
    }

    /// Per-head values, `[H, T, d_k]`.
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Row-stochastic attention weights, `[H, T, T]`.
    pub fn attention(&self) -> &Tensor {
        &self.attention
    }

    /// Attention output after the output projection, `[T, D]`.
    pub fn msa_out(&self) -> &Tensor {
        &self.msa_out
    }

    /// `z'_l`: attention output plus the block input.
    pub fn residual(&self) -> &Tensor {
        &self.residual
    }

    /// LayerNorm output fed to the MLP, `[T, D]`.
    pub fn mlp_input(&self) -> &Tensor {
        &self.mlp_input
    }

    /// MLP hidden activations after GELU, `[T, mlp_hidden]`.
    pub fn mlp_hidden(&self) -> &Tensor {
        &self.mlp_hidden
    }

    /// `z_l`, the block output.
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Every named intermediate of one forward pass. Read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub(crate) config: ViTConfig,
    pub(crate) patch_embeddings: Tensor,
    pub(crate) z0: Tensor,
    pub(crate) blocks: Vec<BlockTrace>,
    pub(crate) y: Tensor,
    pub(crate) logits: Tensor,
    pub(crate) probs: Tensor,
}

impl ActivationTrace {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Patch-embedding output before the CLS token and positions, `[N, D]`.
    pub fn patch_embeddings(&self) -> &Tensor {
        &self.patch_embeddings
    }

    /// Encoder input `z_0`, `[N + 1, D]`.
    pub fn z0(&self) -> &Tensor {
        &self.z0
    }

    pub fn blocks(&self) -> &[BlockTrace] {
        &self.blocks
    }

    /// Block `layer` in `1..=L`.
    pub fn block(&self, layer: usize) -> Result<&BlockTrace> {
        let n = self.blocks.len();
        if layer == 0 || layer > n {
            return Err(Error::out_of_range("block", layer, 1, n));
        }
        Ok(&self.blocks[layer - 1])
    }

    /// Token matrix after `layer` blocks: `z_0` for 0, otherwise `z_layer`.
    pub fn layer_output(&self, layer: usize) -> Result<&Tensor> {
        match layer {
            0 => Ok(&self.z0),
            l if l <= self.blocks.len() => Ok(&self.blocks[l - 1].output),
            l => Err(Error::out_of_range("layer", l, 0, self.blocks.len())),
        }
    }

    /// Final encoder output `z_L`.
    pub fn encoder_output(&self) -> &Tensor {
        self.blocks.last().map_or(&self.z0, |b| &b.output)
    }

    /// Normalized CLS representation `y`, `[1, D]`.
    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// Index of the most probable class (first one on ties).
    pub fn predicted_class(&self) -> usize {
        argmax(self.probs.data())
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}
