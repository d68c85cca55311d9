//! Dense row-major `f32` tensors and the handful of kernels the forward pass
//! needs.
//!
//! Reductions (matmul dot products, LayerNorm moments, softmax denominators)
//! accumulate in `f64` in a fixed order, so results are bit-reproducible for a
//! given build.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_extents(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "buffer of {} elements does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[numel / last, last]`.
    pub fn n_rows(&self) -> usize {
        self.numel() / self.row_len()
    }

    /// Row `i` of the `[numel / last, last]` view.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.row_len())
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cannot index the leading axis of shape {:?}",
                self.shape
            )));
        }
        if index >= self.shape[0] {
            return Err(Error::out_of_range("leading axis", index, 0, self.shape[0] - 1));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        check_extents(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

// Output tile sizes for matmul. Rows of `a` are processed in blocks so each
// streamed row of `b` is reused across the block.
const ROW_BLOCK: usize = 8;
const COL_BLOCK: usize = 256;

/// `a [m,k] · b [k,n] -> [m,n]`.
///
/// Every output element is accumulated in `f64` over `k` in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ad, bd) = (&a.data, &b.data);
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; ROW_BLOCK * COL_BLOCK];

    for j0 in (0..n).step_by(COL_BLOCK) {
        let jw = COL_BLOCK.min(n - j0);
        for i0 in (0..m).step_by(ROW_BLOCK) {
            let ih = ROW_BLOCK.min(m - i0);
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let b_row = &bd[p * n + j0..p * n + j0 + jw];
                for r in 0..ih {
                    let a_rp = ad[(i0 + r) * k + p] as f64;
                    let acc_row = &mut acc[r * COL_BLOCK..r * COL_BLOCK + jw];
                    for (s, &bv) in acc_row.iter_mut().zip(b_row) {
                        *s += a_rp * bv as f64;
                    }
                }
            }
            for r in 0..ih {
                let dst = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + jw];
                for (d, &s) in dst.iter_mut().zip(&acc[r * COL_BLOCK..r * COL_BLOCK + jw]) {
                    *d = s as f32;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Adds `bias [n]` to every row of `x [..., n]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.rank() != 1 || bias.numel() != x.row_len() {
        return Err(Error::Shape {
            op: "add_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(bias.numel()) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

/// `x · w + bias`, the affine map used by every projection in the model.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    add_bias(&matmul(x, w)?, bias)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::out_of_range("softmax axis", axis, 0, x.rank() - 1));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0f32; x.numel()];
    let mut exps = vec![0f64; len];

    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |t: usize| base + t * inner;
            let max = (0..len)
                .map(|t| x.data[at(t)])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0f64;
            for (t, e) in exps.iter_mut().enumerate() {
                *e = (x.data[at(t)] as f64 - max).exp();
                sum += *e;
            }
            for (t, e) in exps.iter().enumerate() {
                out[at(t)] = (e / sum) as f32;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Row softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax(x, x.rank() - 1)
}

/// LayerNorm over the last axis with biased (population) variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.row_len();
    for p in [gamma, beta] {
        if p.rank() != 1 || p.numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv_std = 1.0 / (var + eps as f64).sqrt();
        out.extend(row.iter().zip(&gamma.data).zip(&beta.data).map(|((&v, &g), &b)| {
            ((v as f64 - mean) * inv_std * g as f64 + b as f64) as f32
        }));
    }
    Tensor::new(x.shape.clone(), out)
}

/// Exact GELU, `x · Φ(x)` with the erf-based normal CDF, evaluated in `f64`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v as f64) as f32).collect(),
    }
}
