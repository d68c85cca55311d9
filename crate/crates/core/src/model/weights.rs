//! Parameter set of a ViT classifier and its canonical naming scheme.
//!
//! Projection matrices are stored `[in, out]` so every affine map is `x · W + b`.
//! The patch kernel is stored as `D` convolution kernels of shape `P x P x C`,
//! i.e. `[D, P, P, C]`, matching the `[H, W, C]` layout of input images.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out_proj: Linear,
    pub ln2: LayerNormParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub config: ViTConfig,
    /// `[D, P, P, C]`
    pub patch_kernel: Tensor,
    /// `[D]`
    pub patch_bias: Tensor,
    /// `[1, D]`
    pub cls_token: Tensor,
    /// `[N + 1, D]`
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: LayerNormParams,
    /// `[D, n_classes]`
    pub head: Linear,
}

/// Every parameter name with its expected shape, in canonical order.
pub fn parameter_specs(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let h = config.mlp_hidden;
    let mut specs = vec![
        (
            "embed.patch_kernel".to_string(),
            vec![d, config.patch, config.patch, config.channels],
        ),
        ("embed.patch_bias".to_string(), vec![d]),
        ("embed.cls_token".to_string(), vec![1, d]),
        ("embed.pos_embed".to_string(), vec![config.n_tokens(), d]),
    ];
    for l in 0..config.n_blocks {
        let p = |s: &str| format!("block.{l}.{s}");
        specs.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("mlp_in.weight"), vec![d, h]),
            (p("mlp_in.bias"), vec![h]),
            (p("mlp_out.weight"), vec![h, d]),
            (p("mlp_out.bias"), vec![d]),
        ]);
    }
    specs.extend([
        ("final_ln.gamma".to_string(), vec![d]),
        ("final_ln.beta".to_string(), vec![d]),
        ("head.weight".to_string(), vec![d, config.n_classes]),
        ("head.bias".to_string(), vec![config.n_classes]),
    ]);
    specs
}

impl ViTWeights {
    /// All tensors paired with their canonical names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.patch_kernel".into(), &self.patch_kernel),
            ("embed.patch_bias".into(), &self.patch_bias),
            ("embed.cls_token".into(), &self.cls_token),
            ("embed.pos_embed".into(), &self.pos_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block.{l}.{s}");
            out.extend([
                (p("ln1.gamma"), &b.ln1.gamma),
                (p("ln1.beta"), &b.ln1.beta),
                (p("attn.wq"), &b.query.weight),
                (p("attn.bq"), &b.query.bias),
                (p("attn.wk"), &b.key.weight),
                (p("attn.bk"), &b.key.bias),
                (p("attn.wv"), &b.value.weight),
                (p("attn.bv"), &b.value.bias),
                (p("attn.wo"), &b.out_proj.weight),
                (p("attn.bo"), &b.out_proj.bias),
                (p("ln2.gamma"), &b.ln2.gamma),
                (p("ln2.beta"), &b.ln2.beta),
                (p("mlp_in.weight"), &b.mlp_in.weight),
                (p("mlp_in.bias"), &b.mlp_in.bias),
                (p("mlp_out.weight"), &b.mlp_out.weight),
                (p("mlp_out.bias"), &b.mlp_out.bias),
            ]);
        }
        out.extend([
            ("final_ln.gamma".into(), &self.final_ln.gamma),
            ("final_ln.beta".into(), &self.final_ln.beta),
            ("head.weight".into(), &self.head.weight),
            ("head.bias".into(), &self.head.bias),
        ]);
        out
    }

    /// Assembles weights from a name -> tensor map, requiring exactly the
    /// parameter set of `config` with matching shapes and finite values.
    pub fn from_named(config: ViTConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        for (name, shape) in &specs {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            check_tensor(name, shape, t)?;
        }
        if tensors.len() != specs.len() {
            let known: std::collections::HashSet<&str> =
                specs.iter().map(|(n, _)| n.as_str()).collect();
            let extra = tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .expect("more tensors than specs implies an unknown name");
            return Err(Error::UnexpectedParameter(extra.clone()));
        }

        let t = &mut tensors;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for l in 0..config.n_blocks {
            let p = |s: &str| format!("block.{l}.{s}");
            blocks.push(BlockWeights {
                ln1: take_ln(t, &p("ln1")),
                query: take_linear(t, &p("attn.wq"), &p("attn.bq")),
                key: take_linear(t, &p("attn.wk"), &p("attn.bk")),
                value: take_linear(t, &p("attn.wv"), &p("attn.bv")),
                out_proj: take_linear(t, &p("attn.wo"), &p("attn.bo")),
                ln2: take_ln(t, &p("ln2")),
                mlp_in: take_linear(t, &p("mlp_in.weight"), &p("mlp_in.bias")),
                mlp_out: take_linear(t, &p("mlp_out.weight"), &p("mlp_out.bias")),
            });
        }

        Ok(Self {
            config,
            patch_kernel: take(t, "embed.patch_kernel"),
            patch_bias: take(t, "embed.patch_bias"),
            cls_token: take(t, "embed.cls_token"),
            pos_embed: take(t, "embed.pos_embed"),
            blocks,
            final_ln: take_ln(t, "final_ln"),
            head: take_linear(t, "head.weight", "head.bias"),
        })
    }

    /// Checks that every parameter is present with its config-derived shape
    /// and holds only finite values.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let named: BTreeMap<String, &Tensor> = self.named_tensors().into_iter().collect();
        if self.blocks.len() > self.config.n_blocks {
            return Err(Error::UnexpectedParameter(format!(
                "block.{}",
                self.config.n_blocks
            )));
        }
        for (name, shape) in parameter_specs(&self.config) {
            let t = named
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            check_tensor(&name, &shape, t)?;
        }
        Ok(())
    }

    /// Deterministic random weights, uniform in `[-scale, scale]`, with
    /// LayerNorm gains near 1.
    pub fn random(config: ViTConfig, seed: u64, scale: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = parameter_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let is_gain = name.ends_with(".gamma");
                let t = Tensor::from_fn(&shape, |_| {
                    let u = rng.random_range(-scale..=scale);
                    if is_gain {
                        1.0 + u
                    } else {
                        u
                    }
                });
                (name, t)
            })
            .collect();
        Self::from_named(config, tensors)
    }
}

impl BlockWeights {
    /// A block whose parameters are all zero, including LayerNorm gains.
    pub fn zeros(config: &ViTConfig) -> Self {
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let ln = || LayerNormParams {
            gamma: Tensor::zeros(&[d]),
            beta: Tensor::zeros(&[d]),
        };
        let lin = |i: usize, o: usize| Linear {
            weight: Tensor::zeros(&[i, o]),
            bias: Tensor::zeros(&[o]),
        };
        Self {
            ln1: ln(),
            query: lin(d, d),
            key: lin(d, d),
            value: lin(d, d),
            out_proj: lin(d, d),
            ln2: ln(),
            mlp_in: lin(d, h),
            mlp_out: lin(h, d),
        }
    }
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Tensor {
    tensors.remove(name).expect("presence checked before assembly")
}

fn take_linear(tensors: &mut BTreeMap<String, Tensor>, weight: &str, bias: &str) -> Linear {
    Linear {
        weight: take(tensors, weight),
        bias: take(tensors, bias),
    }
}

fn take_ln(tensors: &mut BTreeMap<String, Tensor>, prefix: &str) -> LayerNormParams {
    LayerNormParams {
        gamma: take(tensors, &format!("{prefix}.gamma")),
        beta: take(tensors, &format!("{prefix}.beta")),
    }
}

fn check_tensor(name: &str, expected: &[usize], t: &Tensor) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ParameterShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    if !t.is_finite() {
        return Err(Error::NonFiniteParameter(name.to_string()));
    }
    Ok(())
}
