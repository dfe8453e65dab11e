//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes in exact reverse recording order and accumulates gradients
//! additively. Nodes that cannot reach a trainable leaf are skipped.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::rope::RotaryTable;
use crate::scalar::Scalar;
use crate::tensor::{layernorm_in_place, matmul_into, softmax_in_place, transpose_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<S>),
    Rotate(Var, Arc<RotaryTable<S>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ReplaceRows(Var, Var, Arc<Vec<bool>>),
    Mse(Var, Arc<Tensor<S>>),
    Sum(Var),
    SumSquares(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    S::of(0.5) * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = S::of(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push_raw(value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.value(b).transpose()?;
        let out = self.value(a).matmul(&bt)?;
        self.push(out, Op::MatMulNT(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds the single row `b` (`1×n` or `n`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = xv.cols();
        if bv.numel() != n {
            return shape_err(format!("add_row: row of {} onto {} columns", bv.numel(), n));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b], "add_row")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        self.push(out, Op::Softmax(x), &[x], "softmax")
    }

    /// Softmax where row `i` only sees columns with `visible[i * cols + j]`.
    pub fn masked_softmax_rows(&mut self, x: Var, visible: Arc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        xv.ensure_finite("softmax input")?;
        let n = xv.cols();
        if visible.len() != xv.numel() {
            return shape_err("masked softmax: mask size mismatch");
        }
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let vis = &visible[r * n..(r + 1) * n];
            if !vis.iter().any(|&v| v) {
                return Err(Error::Numeric(format!("masked softmax: row {r} sees no keys")));
            }
            softmax_in_place(row, Some(vis));
        }
        self.push(out, Op::Softmax(x), &[x], "masked softmax")
    }

    pub fn layernorm(&mut self, x: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 {
            return shape_err("layernorm over empty rows");
        }
        let mut out = xv.clone();
        let inv: Vec<S> = out
            .data_mut()
            .chunks_mut(n)
            .map(|row| layernorm_in_place(row, eps))
            .collect();
        self.push(out, Op::LayerNorm(x, inv), &[x], "layernorm")
    }

    pub fn rotate(&mut self, x: Var, table: Arc<RotaryTable<S>>) -> Result<Var> {
        let out = table.apply(self.value(x))?;
        self.push(out, Op::Rotate(x, table), &[x], "rotate")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.matrix_dims("slice_cols")?;
        if start + len > n {
            return shape_err(format!("slice_cols {start}+{len} > {n}"));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push(out, Op::SliceCols(x, start), &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return shape_err("concat_cols: row mismatch");
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Rows of `x` flagged in `mask` are replaced by the single row `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let n = xv.cols();
        if rv.numel() != n || mask.len() != xv.rows() {
            return shape_err("replace_rows: shape mismatch");
        }
        let mut out = xv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(rv.data());
            }
        }
        self.push(out, Op::ReplaceRows(x, row, mask), &[x, row], "replace_rows")
    }

    /// Mean squared error against a constant target; a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Arc<Tensor<S>>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.dims() != target.dims() {
            return shape_err(format!("mse: {:?} vs {:?}", pv.dims(), target.dims()));
        }
        let n = S::of(pv.numel() as f64);
        let total = pv
            .data()
            .iter()
            .zip(target.data())
            .fold(S::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        let out = Tensor::new(vec![1], vec![total / n])?;
        self.push(out, Op::Mse(pred, target), &[pred], "mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::new(vec![1], vec![self.value(x).sum()])?;
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(S::zero(), |a, &v| a + v * v);
        let out = Tensor::new(vec![1], vec![s])?;
        self.push(out, Op::SumSquares(x), &[x], "sum_squares")
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return shape_err("backward needs a scalar root");
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.dims().to_vec(), d).expect("grad shape")))
            .collect::<Vec<_>>();
        for (i, g) in out.iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad {
                    g.ensure_finite("gradient")?;
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut bt = vec![S::zero(); k * n];
                    transpose_into(bv.data(), k, n, &mut bt);
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(g, &bt, m, n, k, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut at = vec![S::zero(); k * m];
                    transpose_into(av.data(), m, k, &mut at);
                    let mut db = vec![S::zero(); k * n];
                    matmul_into(&at, g, k, m, n, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if self.needs(*a) {
                    // dA = dC · B
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(g, bv.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = dCᵀ · A
                    let mut gt = vec![S::zero(); n * m];
                    transpose_into(g, m, n, &mut gt);
                    let mut db = vec![S::zero(); n * k];
                    matmul_into(&gt, av.data(), n, m, k, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let n = y.cols();
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(g).map(|(&xi, &gi)| gi * gelu_grad(xi)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let n = y.cols();
                let mut d = vec![S::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot = yr.iter().zip(gr).fold(S::zero(), |a, (&p, &q)| a + p * q);
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm(x, inv) => {
                let n = y.cols();
                let nf = S::of(n as f64);
                let mut d = vec![S::zero(); y.numel()];
                for (r, ((yr, gr), dr)) in y.data().chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)).enumerate() {
                    let mean_g = gr.iter().fold(S::zero(), |a, &v| a + v) / nf;
                    let mean_gy = yr.iter().zip(gr).fold(S::zero(), |a, (&p, &q)| a + p * q) / nf;
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = inv[r] * (gg - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Rotate(x, table) => {
                let mut d = g.to_vec();
                table.apply_in_place(&mut d, true);
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let len = y.cols();
                let mut d = vec![S::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let m = y.rows();
                let n = y.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * n + col..r * n + col + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ReplaceRows(x, row, mask) => {
                let n = y.cols();
                if self.needs(*x) {
                    let mut d = g.to_vec();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            d[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = S::zero());
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*row) {
                    let mut d = vec![S::zero(); n];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, &v) in d.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += v;
                            }
                        }
                    }
                    self.accumulate(grads, *row, d);
                }
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred);
                let c = S::of(2.0) * g[0] / S::of(pv.numel() as f64);
                let d = pv.data().iter().zip(target.data()).map(|(&p, &t)| c * (p - t)).collect();
                self.accumulate(grads, *pred, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                let two = S::of(2.0) * g[0];
                self.accumulate(grads, *x, xv.data().iter().map(|&v| two * v).collect());
            }
        }
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A scalar-valued function that can be evaluated at any precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Coordinates whose gradient is this many times smaller than the largest one
/// in the tensor are compared against that fraction of the largest instead.
pub const GRAD_FLOOR_RATIO: f64 = 1e-3;

/// Max over coordinates of `|analytic − fd| / max(|fd|, GRAD_FLOOR_RATIO · max|fd|, 1e-12)`,
/// with `fd` the central difference.
///
/// The analytic gradient comes from backward at precision `S`; the central
/// differences are evaluated in 64-bit so the comparison measures the
/// backward pass rather than finite-difference rounding noise.
pub fn grad_check<S: Scalar, F: ScalarFn>(f: &F, x: &Tensor<S>, h: f64) -> Result<f64> {
    let mut tape = Tape::<S>::new();
    let xv = tape.leaf(x.clone());
    let y = f.eval(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.dims()));
    analytic.ensure_finite("analytic gradient")?;

    let x64: Tensor<f64> = x.cast();
    let eval64 = |xp: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(xp);
        let y = f.eval(&mut t, v)?;
        Ok(t.value(y).data()[0])
    };

    let mut fds = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x64.clone();
        plus.data_mut()[i] += h;
        let mut minus = x64.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval64(plus)? - eval64(minus)?) / (2.0 * h);
        if !fd.is_finite() {
            return Err(Error::Numeric(format!("finite difference at {i} is not finite")));
        }
        fds.push(fd);
    }
    let floor = (GRAD_FLOOR_RATIO * fds.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-12);
    Ok(fds
        .iter()
        .zip(analytic.data())
        .map(|(&fd, a)| (a.f64() - fd).abs() / fd.abs().max(floor))
        .fold(0.0, f64::max))
}
