//! Interpretability maps over an [`ActivationTrace`].
//!
//! Every map is a [`HeatGrid`]: the CLS token's value is held separately and
//! the remaining `N` patch values are laid out row-major on the patch grid, so
//! cell `(r, c)` is token `1 + cols·r + c`.

use serde::ser::{Serialize, SerializeStruct, Serializer};

use crate::error::{Error, Result};
use crate::model::{classify_head, ActivationTrace, ViTWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Similarity,
    Positional,
    Attention,
    Channel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    pub kind: MapKind,
    pub rows: usize,
    pub cols: usize,
    /// Raw values, row-major, `rows * cols`.
    pub raw: Vec<f32>,
    /// Display values in `[0, 1]`, row-major.
    pub normalized: Vec<f32>,
    pub cls_value: Option<f32>,
    /// Set when the CLS value took part in the display normalization.
    pub cls_normalized: Option<f32>,
    /// Token-matrix index: 0 is the embedding output, `l` is block `l`.
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub ref_index: Option<usize>,
    pub channel: Option<usize>,
    /// Tokens whose zero norm forced a similarity of 0.
    pub zero_norm_tokens: Vec<usize>,
}

impl HeatGrid {
    fn new(kind: MapKind, rows: usize, cols: usize, raw: Vec<f32>, cls: Option<f32>) -> Result<Self> {
        let normalized = normalize_display(&raw)?;
        Ok(Self {
            kind,
            rows,
            cols,
            raw,
            normalized,
            cls_value: cls,
            cls_normalized: None,
            layer: None,
            head: None,
            ref_index: None,
            channel: None,
            zero_norm_tokens: Vec::new(),
        })
    }

    /// Raw value at grid cell `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.raw[r * self.cols + c]
    }

    /// Raw value for token `token` (0 is CLS).
    pub fn token_value(&self, token: usize) -> Option<f32> {
        match token {
            0 => self.cls_value,
            t if t <= self.raw.len() => Some(self.raw[t - 1]),
            _ => None,
        }
    }

    pub fn raw_rows(&self) -> Vec<Vec<f32>> {
        self.raw.chunks(self.cols).map(<[f32]>::to_vec).collect()
    }

    pub fn normalized_rows(&self) -> Vec<Vec<f32>> {
        self.normalized.chunks(self.cols).map(<[f32]>::to_vec).collect()
    }
}

/// Rounds to 9 significant digits, the fixed precision used in JSON output.
pub fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}")
        .parse()
        .expect("formatted float parses")
}

struct Sig9Rows<'a>(&'a [f32], usize);

impl Serialize for Sig9Rows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self
            .0
            .chunks(self.1)
            .map(|r| r.iter().map(|&v| round_sig9(v as f64)).collect())
            .collect();
        rows.serialize(s)
    }
}

impl Serialize for HeatGrid {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("HeatGrid", 12)?;
        st.serialize_field("kind", &self.kind)?;
        st.serialize_field("layer", &self.layer)?;
        st.serialize_field("head", &self.head)?;
        st.serialize_field("ref_index", &self.ref_index)?;
        st.serialize_field("channel", &self.channel)?;
        st.serialize_field("rows", &self.rows)?;
        st.serialize_field("cols", &self.cols)?;
        st.serialize_field("cls_value", &self.cls_value.map(|v| round_sig9(v as f64)))?;
        st.serialize_field("cls_normalized", &self.cls_normalized.map(|v| round_sig9(v as f64)))?;
        st.serialize_field("raw", &Sig9Rows(&self.raw, self.cols))?;
        st.serialize_field("normalized", &Sig9Rows(&self.normalized, self.cols))?;
        st.serialize_field("zero_norm_tokens", &self.zero_norm_tokens)?;
        st.end()
    }
}

/// Min-max scaling to `[0, 1]`; a constant input maps to 0.5 everywhere.
pub fn normalize_display(values: &[f32]) -> Result<Vec<f32>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot normalize an empty list".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "cannot normalize non-finite values".into(),
        ));
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values
        .iter()
        .map(|&v| ((v as f64 - min) / range) as f32)
        .collect())
}

/// Row-major fill: cell `(r, c)` is `values[cols·r + c]`.
pub fn reshape_grid(values: &[f32], rows: usize, cols: usize) -> Result<Vec<Vec<f32>>> {
    if values.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} values do not fill a {rows}x{cols} grid",
            values.len()
        )));
    }
    Ok(values.chunks(cols).map(<[f32]>::to_vec).collect())
}

pub fn flatten_grid(grid: &[Vec<f32>]) -> Vec<f32> {
    grid.iter().flatten().copied().collect()
}

/// Cosine similarity in `f64`; `None` if either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity of row `reference` against every row of `tokens [N + 1, D]`.
fn similarity_grid(
    kind: MapKind,
    tokens: &Tensor,
    reference: usize,
    rows: usize,
    cols: usize,
) -> Result<HeatGrid> {
    let n_tokens = tokens.n_rows();
    if reference >= n_tokens {
        return Err(Error::out_of_range("reference token", reference, 0, n_tokens - 1));
    }
    let r = tokens.row(reference);
    let mut zero_norm = Vec::new();
    let sims: Vec<f32> = (0..n_tokens)
        .map(|j| match cosine_similarity(r, tokens.row(j)) {
            Some(s) => s as f32,
            None => {
                zero_norm.push(j);
                0.0
            }
        })
        .collect();
    let mut grid = HeatGrid::new(kind, rows, cols, sims[1..].to_vec(), Some(sims[0]))?;
    grid.ref_index = Some(reference);
    grid.zero_norm_tokens = zero_norm;
    Ok(grid)
}

/// Cosine similarity between token `reference` and every token of layer
/// `layer` (0 = embedding output, `l` = output of block `l`).
pub fn similarity_map(trace: &ActivationTrace, layer: usize, reference: usize) -> Result<HeatGrid> {
    let c = trace.config();
    let tokens = trace.layer_output(layer)?;
    let mut grid = similarity_grid(
        MapKind::Similarity,
        tokens,
        reference,
        c.grid_rows(),
        c.grid_cols(),
    )?;
    grid.layer = Some(layer);
    Ok(grid)
}

/// Cosine similarity between positional-embedding rows.
pub fn positional_similarity(w: &ViTWeights, reference: usize) -> Result<HeatGrid> {
    let c = &w.config;
    similarity_grid(
        MapKind::Positional,
        &w.pos_embed,
        reference,
        c.grid_rows(),
        c.grid_cols(),
    )
}

/// Row `reference` of head `head`'s attention matrix in block `layer`.
pub fn attention_map(
    trace: &ActivationTrace,
    layer: usize,
    head: usize,
    reference: usize,
) -> Result<HeatGrid> {
    let c = trace.config();
    let block = trace.block(layer)?;
    if head >= c.n_heads {
        return Err(Error::out_of_range("head", head, 0, c.n_heads - 1));
    }
    let t = c.n_tokens();
    if reference >= t {
        return Err(Error::out_of_range("reference token", reference, 0, t - 1));
    }
    let offset = (head * t + reference) * t;
    let row = &block.attention().data()[offset..offset + t];
    let mut grid = HeatGrid::new(
        MapKind::Attention,
        c.grid_rows(),
        c.grid_cols(),
        row[1..].to_vec(),
        Some(row[0]),
    )?;
    grid.layer = Some(layer);
    grid.head = Some(head);
    grid.ref_index = Some(reference);
    Ok(grid)
}

/// One embedding channel across all tokens of layer `layer`, normalized over
/// all `N + 1` values including CLS.
pub fn channel_grid(trace: &ActivationTrace, layer: usize, channel: usize) -> Result<HeatGrid> {
    let c = trace.config();
    let tokens = trace.layer_output(layer)?;
    if channel >= c.embed_dim {
        return Err(Error::out_of_range("channel", channel, 0, c.embed_dim - 1));
    }
    let column: Vec<f32> = tokens.rows().map(|r| r[channel]).collect();
    let normalized = normalize_display(&column)?;
    Ok(HeatGrid {
        kind: MapKind::Channel,
        rows: c.grid_rows(),
        cols: c.grid_cols(),
        raw: column[1..].to_vec(),
        normalized: normalized[1..].to_vec(),
        cls_value: Some(column[0]),
        cls_normalized: Some(normalized[0]),
        layer: Some(layer),
        head: None,
        ref_index: None,
        channel: Some(channel),
        zero_norm_tokens: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Probe {
    pub ref_index: usize,
    #[serde(serialize_with = "sig9_list")]
    pub logits: Vec<f32>,
    #[serde(serialize_with = "sig9_list")]
    pub probs: Vec<f32>,
}

/// Serializes `f32`s rounded to 9 significant digits.
pub fn sig9_list<S: Serializer>(values: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(values.iter().map(|&v| round_sig9(v as f64)))
}

/// Classification head applied to token `reference` of the final layer
/// instead of the CLS token.
pub fn patch_probe(trace: &ActivationTrace, w: &ViTWeights, reference: usize) -> Result<Probe> {
    if trace.config() != &w.config {
        return Err(Error::InvalidArgument(
            "trace and weights were built for different configs".into(),
        ));
    }
    let z = trace.encoder_output();
    if reference >= z.n_rows() {
        return Err(Error::out_of_range("reference token", reference, 0, z.n_rows() - 1));
    }
    let token = Tensor::new(vec![1, z.row_len()], z.row(reference).to_vec())?;
    let (logits, probs) = classify_head(&token, w)?;
    Ok(Probe {
        ref_index: reference,
        logits: logits.into_data(),
        probs: probs.into_data(),
    })
}
