//! Dense row-major arrays and the handful of deterministic kernels the model
//! needs. Shapes are always explicit; the only broadcasting is row-wise.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {:?} need {} values, got {}",
                dims,
                n,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], value: S) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return shape_err("ragged rows");
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| T::of(x.f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![S::zero(); m * n];
        transpose_into(&self.data, m, n, &mut out);
        Ok(Self {
            dims: vec![n, m],
            data: out,
        })
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let n = self.cols();
        if start > end || end > self.rows() {
            return Err(Error::Index(format!(
                "row range {start}..{end} out of {}",
                self.rows()
            )));
        }
        Self::new(vec![end - start, n], self.data[start * n..end * n].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Self> {
        let n = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.cols() != n {
                return shape_err("concat_rows: column mismatch");
            }
            data.extend_from_slice(&p.data);
            m += p.rows();
        }
        Self::new(vec![m, n], data)
    }

    pub fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [m, n] => Ok((*m, *n)),
            d => shape_err(format!("{what}: expected a matrix, got dims {d:?}")),
        }
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul lhs")?;
        let (k2, n) = other.matrix_dims("matmul rhs")?;
        if k != k2 {
            return shape_err(format!("matmul: [{m}x{k}] x [{k2}x{n}]"));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Ok(Self {
            dims: vec![m, n],
            data: out,
        })
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        self.ensure_finite("softmax input")?;
        let n = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row, None);
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: out,
        })
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layernorm(&self, eps: S) -> Result<Self> {
        let n = self.cols();
        if n == 0 {
            return shape_err("layernorm over an empty last dimension");
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            layernorm_in_place(row, eps);
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            ));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// `out = a · b` with `a: m×k`, `b: k×n`. Each output element accumulates over
/// `k` strictly left to right, and depends only on its own row of `a`.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|x| *x = S::zero());
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose_into<S: Scalar>(a: &[S], m: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Max-subtracted softmax over one row. Entries with `visible[j] == false` get
/// probability exactly zero and take no part in the max or the normalizer.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S], visible: Option<&[bool]>) {
    let vis = |j: usize| visible.map_or(true, |v| v[j]);
    let mut max = S::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if vis(j) && x > max {
            max = x;
        }
    }
    let mut total = S::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if vis(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = S::zero();
        }
    }
    if total > S::zero() {
        for (j, x) in row.iter_mut().enumerate() {
            if vis(j) {
                *x /= total;
            }
        }
    }
}

/// Returns `1/sqrt(var + eps)` so backward can reuse it.
pub(crate) fn layernorm_in_place<S: Scalar>(row: &mut [S], eps: S) -> S {
    let n = S::of(row.len() as f64);
    let mean = row.iter().fold(S::zero(), |a, &x| a + x) / n;
    let var = row
        .iter()
        .fold(S::zero(), |a, &x| a + (x - mean) * (x - mean))
        / n;
    let inv = S::one() / (var + eps).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) * inv;
    }
    inv
}
