//! Dense 64-bit tensors of rank 1–3 plus the row-wise expansion map,
//! row softmax, and elementwise nonlinearities used by the model.
//!
//! Tensors are immutable row-major values. Rank-2 shapes are written
//! `rows x cols`; a rank-3 tensor `[b, r, c]` is treated as `b` stacked
//! `r x c` matrices where that matters (message payloads).

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("empty tensor not allowed in {0}")]
    Empty(&'static str),
    #[error("invalid dims {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },
    #[error("unknown activation '{0}'")]
    UnknownActivation(String),
}

/// Dense row-major f64 tensor, rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Validating constructor for external inputs: rejects rank 0 or >3,
    /// zero extents, length mismatches, and non-finite values.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(TensorError::InvalidDims {
                dims,
                reason: "rank must be 1..=3".into(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidDims {
                dims,
                reason: "zero extent".into(),
            });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidDims {
                dims,
                reason: format!("product {} != data length {}", n, data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor { dims, data })
    }

    /// Internal constructor for op results; shape is trusted, values are not
    /// re-scanned. Finiteness of run outputs is policed at the loss.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::from_parts(dims.to_vec(), vec![0.0; dims.iter().product()])
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::from_parts(dims.to_vec(), vec![1.0; dims.iter().product()])
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        Tensor::from_parts(dims.to_vec(), vec![v; dims.iter().product()])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    /// Row-major matrix from nested slices, for tests and small literals.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(r > 0 && c > 0, "matrix literal must be non-empty");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix literal");
            data.extend_from_slice(row);
        }
        Tensor::from_parts(vec![r, c], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs rank 2, have {:?}", self.dims);
        self.dims[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs rank 2, have {:?}", self.dims);
        self.dims[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() needs a one-element tensor");
        self.data[0]
    }

    /// Reinterpret with new dims of identical total length.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 3 {
            return Err(TensorError::InvalidDims {
                dims: dims.to_vec(),
                reason: format!("cannot reshape {:?} ({} values)", self.dims, self.data.len()),
            });
        }
        Ok(Tensor::from_parts(dims.to_vec(), self.data.clone()))
    }

    fn require2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("need rank 2, have {:?}", self.dims),
            });
        }
        Ok((self.dims[0], self.dims[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, ka) = self.require2("matmul")?;
        let (kb, n) = other.require2("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.dims, other.dims),
            });
        }
        let mut out = vec![0.0; m * n];
        // Row-major dgemm: C = 1*A*B + 0*C.
        unsafe {
            matrixmultiply::dgemm(
                m,
                ka,
                n,
                1.0,
                self.data.as_ptr(),
                ka as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.require2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.dims, other.dims),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.dims.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    /// Add a 1 x cols row vector to every row of a rank-2 tensor.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor, TensorError> {
        let (_, n) = self.require2("add_row_broadcast")?;
        let (rr, rc) = row.require2("add_row_broadcast")?;
        if rr != 1 || rc != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{:?} + {:?}", self.dims, row.dims),
            });
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(row.data.iter()) {
                *v += b;
            }
        }
        Ok(Tensor::from_parts(self.dims.clone(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| v * c).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.require2("slice_rows")?;
        if r0 >= r1 || r1 > m {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", r0, r1, self.dims),
            });
        }
        Ok(Tensor::from_parts(
            vec![r1 - r0, n],
            self.data[r0 * n..r1 * n].to_vec(),
        ))
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.require2("slice_cols")?;
        if c0 >= c1 || c1 > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {}..{} of {:?}", c0, c1, self.dims),
            });
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&self.data[r * n + c0..r * n + c1]);
        }
        Ok(Tensor::from_parts(vec![m, w], data))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, TensorError> {
        let (m, n) = self.require2("gather_rows")?;
        if idx.iter().any(|&i| i >= m) {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("index out of {} rows", m),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor::from_parts(vec![idx.len(), n], data))
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat_rows"));
        }
        let n = parts[0].require2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pm, pn) = p.require2("concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", n, pn),
                });
            }
            rows += pm;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![rows, n], data))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat_cols"));
        }
        let m = parts[0].require2("concat_cols")?.0;
        let mut width = 0;
        for p in parts {
            let (pm, pn) = p.require2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", m, pm),
                });
            }
            width += pn;
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            for p in parts {
                let pn = p.dims[1];
                data.extend_from_slice(&p.data[r * pn..(r + 1) * pn]);
            }
        }
        Ok(Tensor::from_parts(vec![m, width], data))
    }

    /// Stack equal-shaped rank-2 tensors into [count, rows, cols].
    pub fn stack(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty("stack"));
        }
        let (m, n) = parts[0].require2("stack")?;
        let mut data = Vec::with_capacity(parts.len() * m * n);
        for p in parts {
            if p.dims != [m, n] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", p.dims, [m, n]),
                });
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![parts.len(), m, n], data))
    }

    /// Matrix `i` of a rank-3 stack.
    pub fn unstack(&self, i: usize) -> Result<Tensor, TensorError> {
        if self.rank() != 3 || i >= self.dims[0] {
            return Err(TensorError::ShapeMismatch {
                op: "unstack",
                detail: format!("index {} of {:?}", i, self.dims),
            });
        }
        let (m, n) = (self.dims[1], self.dims[2]);
        Ok(Tensor::from_parts(
            vec![m, n],
            self.data[i * m * n..(i + 1) * m * n].to_vec(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)
    }
}

/// Row-wise column-pair expansion: for W of shape N x d and V of shape
/// N x d_n, column p = k*d_n + l of the result is W[:,k] ⊙ V[:,l]
/// (k-major, l-minor). Satisfies
/// (W_i W_j^T) ⊙ (V_i V_j^T) = gamma(W_i,V_i) · gamma(W_j,V_j)^T.
pub fn gamma_map(w: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    if w.rank() != 2 || v.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "gamma_map",
            detail: format!("{:?}, {:?}", w.dims(), v.dims()),
        });
    }
    let (n, d) = (w.dims()[0], w.dims()[1]);
    let (nv, dn) = (v.dims()[0], v.dims()[1]);
    if n != nv {
        return Err(TensorError::ShapeMismatch {
            op: "gamma_map",
            detail: format!("row counts differ: {} vs {}", n, nv),
        });
    }
    let width = d * dn;
    let mut data = vec![0.0; n * width];
    for r in 0..n {
        let wrow = &w.data[r * d..(r + 1) * d];
        let vrow = &v.data[r * dn..(r + 1) * dn];
        let out = &mut data[r * width..(r + 1) * width];
        for k in 0..d {
            let wk = wrow[k];
            for l in 0..dn {
                out[k * dn + l] = wk * vrow[l];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, width], data))
}

/// Numerically stable row softmax: per-row max subtraction, rows sum to one.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_rows",
            detail: format!("need rank 2, have {:?}", m.dims()),
        });
    }
    if m.is_empty() {
        return Err(TensorError::Empty("softmax_rows"));
    }
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &m.data[r * cols..(r + 1) * cols];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut data[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self, TensorError> {
        match name {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "leaky-relu" | "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(TensorError::UnknownActivation(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky-relu",
        }
    }

    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply_scalar(v))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Named elementwise activation, the configuration-string entry point.
pub fn activation(name: &str, x: &Tensor) -> Result<Tensor, TensorError> {
    Ok(Activation::from_name(name)?.apply(x))
}
