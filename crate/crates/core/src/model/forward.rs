//! The pre-norm ViT forward pass.

use super::config::ViTConfig;
use super::trace::{ActivationTrace, BlockTrace};
use super::weights::{BlockWeights, ViTWeights};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Splits `image [H, W, C]` into non-overlapping patches (row-major over the
/// patch grid) and applies the `D` patch kernels plus bias: `[N, D]`.
pub fn patch_embed(image: &Tensor, w: &ViTWeights) -> Result<Tensor> {
    let c = &w.config;
    let expected = [c.image_h, c.image_w, c.channels];
    if image.shape() != expected {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let rows = im2row(image, c);
    let kernels = w
        .patch_kernel
        .clone()
        .reshape(&[c.embed_dim, c.patch_len()])?;
    tensor::linear(&rows, &tensor::transpose(&kernels)?, &w.patch_bias)
}

/// One flattened `P x P x C` patch per row, `[N, P·P·C]`.
fn im2row(image: &Tensor, c: &ViTConfig) -> Tensor {
    let (p, ch, width) = (c.patch, c.channels, c.image_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c.n_patches() * c.patch_len());
    for gr in 0..c.grid_rows() {
        for gc in 0..c.grid_cols() {
            for r in 0..p {
                let y = gr * p + r;
                let start = (y * width + gc * p) * ch;
                out.extend_from_slice(&src[start..start + p * ch]);
            }
        }
    }
    Tensor::new(vec![c.n_patches(), c.patch_len()], out).expect("im2row extents")
}

/// Prepends the CLS token and adds positional embeddings: `[N + 1, D]`.
pub fn assemble_embedding(patches: &Tensor, w: &ViTWeights) -> Result<Tensor> {
    let c = &w.config;
    if patches.shape() != [c.n_patches(), c.embed_dim] {
        return Err(Error::Shape {
            op: "assemble_embedding",
            lhs: patches.shape().to_vec(),
            rhs: vec![c.n_patches(), c.embed_dim],
        });
    }
    let mut data = Vec::with_capacity(c.n_tokens() * c.embed_dim);
    data.extend_from_slice(w.cls_token.data());
    data.extend_from_slice(patches.data());
    let tokens = Tensor::new(vec![c.n_tokens(), c.embed_dim], data)?;
    tensor::add(&tokens, &w.pos_embed)
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[T, D]`, after the output projection.
    pub out: Tensor,
    /// `[H, T, T]`
    pub attention: Tensor,
    /// `[H, T, d_k]` each.
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Multi-head self-attention over `x [T, D]`.
///
/// Head `h` uses columns `h·d_k .. (h+1)·d_k` of the Q/K/V projections; head
/// outputs are concatenated in head order before the output projection.
pub fn multi_head_attention(
    x: &Tensor,
    block: &BlockWeights,
    config: &ViTConfig,
) -> Result<AttentionOutput> {
    let (t, d) = x.dims2()?;
    if d != config.embed_dim {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: x.shape().to_vec(),
            rhs: vec![t, config.embed_dim],
        });
    }
    let heads = config.n_heads;
    let dk = config.head_dim();
    let scale = 1.0 / (dk as f32).sqrt();

    let q = tensor::linear(x, &block.query.weight, &block.query.bias)?;
    let k = tensor::linear(x, &block.key.weight, &block.key.bias)?;
    let v = tensor::linear(x, &block.value.weight, &block.value.bias)?;

    let mut q_heads = Vec::with_capacity(q.numel());
    let mut k_heads = Vec::with_capacity(k.numel());
    let mut v_heads = Vec::with_capacity(v.numel());
    let mut attention = Vec::with_capacity(heads * t * t);
    let mut context = vec![0f32; t * d];

    for h in 0..heads {
        let qh = head_slice(&q, h, dk);
        let kh = head_slice(&k, h, dk);
        let vh = head_slice(&v, h, dk);

        let scores = tensor::matmul(&qh, &tensor::transpose(&kh)?)?;
        let scores = Tensor::new(
            scores.shape().to_vec(),
            scores.data().iter().map(|s| s * scale).collect(),
        )?;
        let a = tensor::softmax_rows(&scores)?;
        let ctx = tensor::matmul(&a, &vh)?;
        for (row, src) in ctx.rows().enumerate() {
            context[row * d + h * dk..row * d + (h + 1) * dk].copy_from_slice(src);
        }

        q_heads.extend_from_slice(qh.data());
        k_heads.extend_from_slice(kh.data());
        v_heads.extend_from_slice(vh.data());
        attention.extend_from_slice(a.data());
    }

    let context = Tensor::new(vec![t, d], context)?;
    let out = tensor::linear(&context, &block.out_proj.weight, &block.out_proj.bias)?;
    Ok(AttentionOutput {
        out,
        attention: Tensor::new(vec![heads, t, t], attention)?,
        query: Tensor::new(vec![heads, t, dk], q_heads)?,
        key: Tensor::new(vec![heads, t, dk], k_heads)?,
        value: Tensor::new(vec![heads, t, dk], v_heads)?,
    })
}

fn head_slice(x: &Tensor, head: usize, dk: usize) -> Tensor {
    let data = x
        .rows()
        .flat_map(|r| &r[head * dk..(head + 1) * dk])
        .copied()
        .collect();
    Tensor::new(vec![x.n_rows(), dk], data).expect("head slice extents")
}

/// One pre-norm encoder block:
/// `z' = MSA(LN(z)) + z`, then `z_out = MLP(LN(z')) + z'`.
pub fn encoder_block(
    z_prev: &Tensor,
    block: &BlockWeights,
    config: &ViTConfig,
) -> Result<(Tensor, BlockTrace)> {
    let eps = config.layer_norm_eps;
    let attn_input = tensor::layer_norm(z_prev, &block.ln1.gamma, &block.ln1.beta, eps)?;
    let msa = multi_head_attention(&attn_input, block, config)?;
    let residual = tensor::add(&msa.out, z_prev)?;

    let mlp_input = tensor::layer_norm(&residual, &block.ln2.gamma, &block.ln2.beta, eps)?;
    let pre_act = tensor::linear(&mlp_input, &block.mlp_in.weight, &block.mlp_in.bias)?;
    let mlp_hidden = tensor::gelu(&pre_act);
    let mlp_out = tensor::linear(&mlp_hidden, &block.mlp_out.weight, &block.mlp_out.bias)?;
    let output = tensor::add(&mlp_out, &residual)?;

    let trace = BlockTrace {
        attn_input,
        query: msa.query,
        key: msa.key,
        value: msa.value,
        attention: msa.attention,
        msa_out: msa.out,
        residual,
        mlp_input,
        mlp_hidden,
        output: output.clone(),
    };
    Ok((output, trace))
}

/// Final LayerNorm, linear head and softmax applied to one token `[1, D]`.
pub fn classify_head(token: &Tensor, w: &ViTWeights) -> Result<(Tensor, Tensor)> {
    let c = &w.config;
    if token.shape() != [1, c.embed_dim] {
        return Err(Error::Shape {
            op: "classify_head",
            lhs: token.shape().to_vec(),
            rhs: vec![1, c.embed_dim],
        });
    }
    let y = tensor::layer_norm(token, &w.final_ln.gamma, &w.final_ln.beta, c.layer_norm_eps)?;
    let logits = tensor::linear(&y, &w.head.weight, &w.head.bias)?;
    let probs = tensor::softmax_rows(&logits)?;
    Ok((logits, probs))
}

/// Runs the full model on `image [H, W, C]`, recording every intermediate.
pub fn forward(image: &Tensor, w: &ViTWeights) -> Result<ActivationTrace> {
    w.validate()?;
    let c = &w.config;

    let patch_embeddings = patch_embed(image, w)?;
    let z0 = assemble_embedding(&patch_embeddings, w)?;

    let mut blocks = Vec::with_capacity(c.n_blocks);
    let mut z = z0.clone();
    for block in &w.blocks {
        let (next, trace) = encoder_block(&z, block, c)?;
        blocks.push(trace);
        z = next;
    }

    let cls = Tensor::new(vec![1, c.embed_dim], z.row(0).to_vec())?;
    let y = tensor::layer_norm(&cls, &w.final_ln.gamma, &w.final_ln.beta, c.layer_norm_eps)?;
    let (logits, probs) = classify_head(&cls, w)?;

    Ok(ActivationTrace {
        config: *c,
        patch_embeddings,
        z0,
        blocks,
        y,
        logits,
        probs,
    })
}
