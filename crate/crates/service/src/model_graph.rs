//! Hierarchical description of the architecture for the overview diagram:
//! embedding, encoder and head at the top level, the encoder expanding into its
//! blocks and each block into its layers.

use serde::Serialize;
use vitprobe::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelNode {
    pub id: String,
    pub label: String,
    pub tooltip: String,
    /// Output shape of this stage, e.g. `197x768`.
    pub output_shape: String,
    pub children: Vec<ModelNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGraph {
    pub config: ViTConfig,
    pub root: ModelNode,
}

fn leaf(id: String, label: &str, tooltip: String, shape: String) -> ModelNode {
    ModelNode {
        id,
        label: label.into(),
        tooltip,
        output_shape: shape,
        children: Vec::new(),
    }
}

fn block(c: &ViTConfig, l: usize) -> ModelNode {
    let (t, d, h, heads, dk) = (c.n_tokens(), c.embed_dim, c.mlp_hidden, c.n_heads, c.head_dim());
    let td = format!("{t}x{d}");
    let id = |s: &str| format!("block.{l}.{s}");
    let msa = ModelNode {
        id: id("msa"),
        label: "Multi-head self-attention".into(),
        tooltip: format!(
            "{heads} heads of {dk} dims attend over all {t} tokens; head outputs are concatenated and projected back to {d} dims"
        ),
        output_shape: td.clone(),
        children: vec![
            leaf(id("msa.q"), "Query", format!("Q = x·Wq + bq, split into {heads} heads of {dk}"), td.clone()),
            leaf(id("msa.k"), "Key", format!("K = x·Wk + bk, split into {heads} heads of {dk}"), td.clone()),
            leaf(id("msa.v"), "Value", format!("V = x·Wv + bv, split into {heads} heads of {dk}"), td.clone()),
            leaf(
                id("msa.scores"),
                "Scores",
                format!("Q·Kᵀ / sqrt({dk}) for every head"),
                format!("{heads}x{t}x{t}"),
            ),
            leaf(
                id("msa.softmax"),
                "Softmax",
                "Row-wise softmax: each token's attention weights over all tokens sum to 1".into(),
                format!("{heads}x{t}x{t}"),
            ),
            leaf(id("msa.context"), "Weighted sum", "A·V per head, heads concatenated".into(), td.clone()),
            leaf(id("msa.out"), "Output projection", format!("{d}x{d} linear map W^O + bias"), td.clone()),
        ],
    };
    let mlp = ModelNode {
        id: id("mlp"),
        label: "MLP".into(),
        tooltip: format!("Two linear layers {d} → {h} → {d} with GELU between, applied to each token"),
        output_shape: td.clone(),
        children: vec![
            leaf(id("mlp.fc1"), "Linear", format!("{d} → {h}"), format!("{t}x{h}")),
            leaf(id("mlp.gelu"), "GELU", "x·Φ(x), the exact erf form".into(), format!("{t}x{h}")),
            leaf(id("mlp.fc2"), "Linear", format!("{h} → {d}"), td.clone()),
        ],
    };
    ModelNode {
        id: format!("block.{l}"),
        label: format!("Transformer block {l}"),
        tooltip: "Pre-norm block: z' = MSA(LN(z)) + z, then z = MLP(LN(z')) + z'".into(),
        output_shape: td.clone(),
        children: vec![
            leaf(id("ln1"), "LayerNorm", "Normalizes each token before attention".into(), td.clone()),
            msa,
            leaf(id("add1"), "Add", "Residual connection around attention".into(), td.clone()),
            leaf(id("ln2"), "LayerNorm", "Normalizes each token before the MLP".into(), td.clone()),
            mlp,
            leaf(id("add2"), "Add", "Residual connection around the MLP".into(), td),
        ],
    }
}

/// Builds the overview tree for `c`. Block ids are 1-based, matching the
/// `layer` parameter of the query endpoints.
pub fn model_graph(c: &ViTConfig) -> ModelGraph {
    let (n, t, d, p) = (c.n_patches(), c.n_tokens(), c.embed_dim, c.patch);
    let embedding = ModelNode {
        id: "embedding".into(),
        label: "Embedding".into(),
        tooltip: format!(
            "The {}x{}x{} image becomes {n} patch tokens of {d} dims, plus a CLS token and positional embeddings",
            c.image_h, c.image_w, c.channels
        ),
        output_shape: format!("{t}x{d}"),
        children: vec![
            leaf(
                "embedding.patch".into(),
                "Patch embedding",
                format!("{d} convolution kernels of {p}x{p}x{} with stride {p}", c.channels),
                format!("{n}x{d}"),
            ),
            leaf(
                "embedding.cls".into(),
                "CLS token",
                "Learned token prepended to the sequence; its final state feeds the classifier".into(),
                format!("{t}x{d}"),
            ),
            leaf(
                "embedding.position".into(),
                "Position embedding",
                "One learned vector per token index, added to every token".into(),
                format!("{t}x{d}"),
            ),
        ],
    };
    let encoder = ModelNode {
        id: "encoder".into(),
        label: "Transformer encoder".into(),
        tooltip: format!("{} identical blocks applied in sequence", c.n_blocks),
        output_shape: format!("{t}x{d}"),
        children: (1..=c.n_blocks).map(|l| block(c, l)).collect(),
    };
    let head = ModelNode {
        id: "head".into(),
        label: "MLP head".into(),
        tooltip: format!("Classifies the final CLS token into {} classes", c.n_classes),
        output_shape: format!("1x{}", c.n_classes),
        children: vec![
            leaf("head.ln".into(), "LayerNorm", "Final normalization of the CLS token".into(), format!("1x{d}")),
            leaf(
                "head.linear".into(),
                "Linear",
                format!("{d} → {} logits", c.n_classes),
                format!("1x{}", c.n_classes),
            ),
            leaf(
                "head.softmax".into(),
                "Softmax",
                "Turns logits into class probabilities".into(),
                format!("1x{}", c.n_classes),
            ),
        ],
    };
    ModelGraph {
        config: *c,
        root: ModelNode {
            id: "vit".into(),
            label: "Vision Transformer".into(),
            tooltip: "Embedding, transformer encoder and classification head".into(),
            output_shape: format!("1x{}", c.n_classes),
            children: vec![embedding, encoder, head],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_config() {
        let g = model_graph(&ViTConfig::vit_b16());
        let top: Vec<&str> = g.root.children.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(top, ["embedding", "encoder", "head"]);
        let encoder = &g.root.children[1];
        assert_eq!(encoder.children.len(), 12);
        assert_eq!(encoder.children[11].id, "block.12");
        let layers: Vec<&str> = encoder.children[0].children.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(layers, ["LayerNorm", "Multi-head self-attention", "Add", "LayerNorm", "MLP", "Add"]);
        assert_eq!(g.root.children[0].children[0].output_shape, "196x768");

        let tiny = model_graph(&ViTConfig::tiny());
        assert_eq!(tiny.root.children[1].children.len(), 2);
        assert_eq!(tiny.root.output_shape, "1x3");
    }

    #[test]
    fn every_node_has_a_tooltip() {
        fn walk(n: &ModelNode) -> bool {
            !n.tooltip.is_empty() && n.children.iter().all(walk)
        }
        assert!(walk(&model_graph(&ViTConfig::vit_b16()).root));
    }
}
