//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the no-grad inference paths.
//!
//! Every tensor with rank ≥ 2 can be viewed as a matrix of
//! `prod(leading dims)` rows by `last dim` columns; most kernels operate on
//! that view.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};

/// Immutable-by-default dense tensor. Cloning is cheap (shared storage);
/// mutation goes through copy-on-write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    /// Builds a `[rows.len(), cols]` matrix. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of columns in the matrix view (last extent, 1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows in the matrix view.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            self.shape[..self.shape.len().saturating_sub(1)]
                .iter()
                .product()
        } else {
            self.len() / c
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(shape_err("Tensor::item", format!("shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Rows `start..end` of the matrix view as a `[end-start, cols]` tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {} rows", self.rows()),
            ));
        }
        let c = self.cols();
        Tensor::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat input"))?;
        let c = first.cols();
        if parts.iter().any(|p| p.cols() != c) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let rows = parts.iter().map(Tensor::rows).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![rows, c], data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_t(self, other, false)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rowmajor(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }
    pub fn t(self) -> Self {
        MatRef {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

/// `c = alpha * a · b + beta * c` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: MatMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.last_index(m, k) < a.data.len().max(1) || k == 0);
    assert!(b.last_index(k, n) < b.data.len().max(1) || k == 0);
    assert!(
        c.offset + (m - 1) * c.rs + (n - 1) * c.cs < c.data.len(),
        "gemm output out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: bounds of every accessed element are checked above; the views
    // do not alias because `c` is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `a · b` (or `a · bᵀ` when `trans_b`) on matrix views.
pub fn matmul_t(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (bk, n) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k != bk {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let bref = MatRef::rowmajor(b.data(), b.cols());
    gemm(
        m,
        k,
        n,
        1.0,
        MatRef::rowmajor(a.data(), k),
        if trans_b { bref.t() } else { bref },
        0.0,
        MatMut {
            data: &mut out,
            offset: 0,
            rs: n,
            cs: 1,
        },
    );
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax restricted to admissible entries. Rows with no
/// admissible entry produce all zeros.
pub fn masked_softmax_rows(scores: &[f64], mask: Option<&[bool]>, cols: usize, out: &mut [f64]) {
    for (r, row) in scores.chunks(cols).enumerate() {
        let dst = &mut out[r * cols..(r + 1) * cols];
        let admit = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let mut max = f64::NEG_INFINITY;
        for (c, &s) in row.iter().enumerate() {
            if admit(c) && s > max {
                max = s;
            }
        }
        if max == f64::NEG_INFINITY {
            dst.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (c, &s) in row.iter().enumerate() {
            let e = if admit(c) { (s - max).exp() } else { 0.0 };
            dst[c] = e;
            sum += e;
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
}

/// Masked softmax on a `[rows, cols]` tensor with a boolean admissibility mask
/// of the same shape.
pub fn masked_softmax(scores: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != scores.len() || scores.ndim() != 2 {
        return Err(shape_err(
            "masked_softmax",
            format!("scores {:?}, mask of {}", scores.shape(), mask.len()),
        ));
    }
    let mut out = vec![0.0; scores.len()];
    masked_softmax_rows(scores.data(), Some(mask), scores.cols(), &mut out);
    Tensor::new(scores.shape().to_vec(), out)
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last dimension. Returns the output along with
/// the normalized activations and per-row inverse standard deviations used by
/// the backward pass.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    scale: &[f64],
    offset: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            out[r * d + c] = h * scale[c] + offset[c];
        }
    }
    (out, xhat, inv_std)
}

pub fn layer_norm(x: &Tensor, scale: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 {
        return Err(invalid("layer_norm over an empty dimension"));
    }
    if scale.len() != d || offset.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("x {:?}, scale {}, offset {}", x.shape(), scale.len(), offset.len()),
        ));
    }
    let (out, _, _) = layer_norm_forward(x.data(), d, scale.data(), offset.data());
    Tensor::new(x.shape().to_vec(), out)
}

/// Elementwise nonlinearities used by the model stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact Gaussian-CDF GeLU: `x · Φ(x)`.
    Gelu,
    /// `max(x, 0)²`.
    SquaredRelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::SquaredRelu => {
                let r = x.max(0.0);
                r * r
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::SquaredRelu => 2.0 * x.max(0.0),
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}
