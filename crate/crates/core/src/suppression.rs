//! Partial-sum magnitudes of rotary phases, the normalized decay curve, the
//! per-instance logit bound, and shot-by-shot attention heatmaps.
//!
//! For a query/key pair split into complex pairs with products
//! `h_i = q_i * conj(k_i)`, the cross-shot logit is the real part of
//! `sum_i h_i exp(i x theta_i)` with `x = k (s1 - s2)`. Summation by parts
//! bounds its magnitude by `max_i |h_{i+1} - h_i| * f(x)`, where
//! `f(x) = sum_j |S_j|` and `S_j` is the partial sum of the first `j` phases.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::rope::{RotaryBasis, DEFAULT_BASE};
use crate::scalar::Scalar;
use crate::shot_rope::ShotRopeParams;
use crate::tensor::Tensor;

/// `f(x) = sum_{j=1}^{d/2} |S_j|` with `S_j = sum_{i<j} exp(i x theta_i)`,
/// accumulated in `S`.
pub fn partial_sum_magnitudes<S: Scalar>(x: S, basis: &RotaryBasis<S>) -> S {
    let (mut re, mut im) = (S::zero(), S::zero());
    let mut total = S::zero();
    for &theta in basis.angles() {
        let phase = x * theta;
        re += phase.cos();
        im += phase.sin();
        total += re.hypot(im);
    }
    total
}

/// Sampled `f` and `delta = f / f(0)` over a grid starting at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCurve {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub f: Vec<f64>,
    pub delta: Vec<f64>,
}

impl BoundCurve {
    pub fn f0(&self) -> f64 {
        self.f[0]
    }

    /// Largest rise `delta(x2) - delta(x1)` over all `x2 > x1` on the grid.
    pub fn max_rise(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        let mut max_after = f64::NEG_INFINITY;
        for &d in self.delta.iter().rev() {
            if max_after.is_finite() {
                worst = worst.max(max_after - d);
            }
            max_after = max_after.max(d);
        }
        if worst.is_finite() {
            worst
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,f,delta\n");
        for i in 0..self.xs.len() {
            let _ = writeln!(s, "{},{},{}", self.xs[i], self.f[i], self.delta[i]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Decay curve for head dimension `d` with the default rotary base, in 64-bit.
pub fn delta_curve(d: usize, xs: &[f64]) -> Result<BoundCurve> {
    let basis = RotaryBasis::<f64>::new(d, DEFAULT_BASE)?;
    delta_curve_with(&basis, xs)
}

pub fn delta_curve_with<S: Scalar>(basis: &RotaryBasis<S>, xs: &[f64]) -> Result<BoundCurve> {
    if xs.is_empty() {
        return Err(Error::Config("delta curve grid is empty".into()));
    }
    if xs[0] != 0.0 {
        return Err(Error::Config(format!("delta curve grid must start at 0, got {}", xs[0])));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("delta curve grid must be strictly ascending".into()));
    }
    let f: Vec<f64> = xs.iter().map(|&x| partial_sum_magnitudes(S::of(x), basis).f64()).collect();
    let f0 = f[0];
    let delta = f.iter().map(|&v| v / f0).collect();
    Ok(BoundCurve {
        dim: basis.dim(),
        xs: xs.to_vec(),
        f,
        delta,
    })
}

/// Evenly spaced grid `0, step, 2 step, ...` up to and including `xmax`.
pub fn uniform_grid(xmax: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(xmax >= 0.0) || !xmax.is_finite() {
        return Err(Error::Config(format!("bad grid: xmax={xmax}, step={step}")));
    }
    let n = (xmax / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

/// Magnitude of the complex cross-shot score and its summation-by-parts
/// bound, both in 64-bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitBound {
    pub score: f64,
    pub logit: f64,
    pub max_step: f64,
    pub f: f64,
    pub bound: f64,
}

impl LogitBound {
    pub fn margin(&self) -> f64 {
        self.bound - self.score
    }
}

pub fn logit_bound<S: Scalar>(
    q: &[S],
    k: &[S],
    s1: usize,
    s2: usize,
    params: &ShotRopeParams,
    basis: &RotaryBasis<S>,
) -> Result<LogitBound> {
    let d = basis.dim();
    if q.len() != d || k.len() != d {
        return shape_err(format!("bound check needs {d}-dim vectors, got {} and {}", q.len(), k.len()));
    }
    let x = params.k * (s1 as f64 - s2 as f64);
    let pairs = d / 2;
    let h: Vec<(f64, f64)> = (0..pairs)
        .map(|i| {
            let (a, b) = (q[2 * i].f64(), q[2 * i + 1].f64());
            let (c, e) = (k[2 * i].f64(), k[2 * i + 1].f64());
            (a * c + b * e, b * c - a * e)
        })
        .collect();
    let (mut re, mut im) = (0.0, 0.0);
    let (mut pre, mut pim) = (0.0f64, 0.0f64);
    let mut f = 0.0;
    let mut max_step = 0.0f64;
    for i in 0..pairs {
        let phase = x * basis.angles()[i].f64();
        let (c, s) = (phase.cos(), phase.sin());
        re += h[i].0 * c - h[i].1 * s;
        im += h[i].0 * s + h[i].1 * c;
        pre += c;
        pim += s;
        f += pre.hypot(pim);
        let next = if i + 1 < pairs { h[i + 1] } else { (0.0, 0.0) };
        max_step = max_step.max((next.0 - h[i].0).hypot(next.1 - h[i].1));
    }
    Ok(LogitBound {
        score: re.hypot(im),
        logit: re,
        max_step,
        f,
        bound: max_step * f,
    })
}

/// `bound - |score|`; non-negative whenever the inequality holds.
pub fn logit_bound_check<S: Scalar>(
    q: &[S],
    k: &[S],
    s1: usize,
    s2: usize,
    params: &ShotRopeParams,
    basis: &RotaryBasis<S>,
) -> Result<f64> {
    Ok(logit_bound(q, k, s1, s2, params, basis)?.margin())
}

/// Shot-by-shot attention summary: entry `(a, b)` is the mean, over queries
/// of shot `a`, of the total probability placed on keys of shot `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotHeatmap {
    pub values: Vec<Vec<f64>>,
}

impl ShotHeatmap {
    pub fn zeros(shots: usize) -> Self {
        Self {
            values: vec![vec![0.0; shots]; shots],
        }
    }

    pub fn shots(&self) -> usize {
        self.values.len()
    }

    /// Block means of one probability matrix (`queries × keys`).
    pub fn from_probs<S: Scalar>(
        probs: &Tensor<S>,
        query_shots: &[usize],
        key_shots: &[usize],
        shots: usize,
    ) -> Result<Self> {
        if probs.rows() != query_shots.len() || probs.cols() != key_shots.len() {
            return shape_err("probability matrix does not match shot maps");
        }
        if query_shots.iter().chain(key_shots).any(|&s| s >= shots) {
            return Err(Error::Index(format!("shot index beyond {shots}")));
        }
        let mut out = Self::zeros(shots);
        let mut counts = vec![0usize; shots];
        for (i, &qs) in query_shots.iter().enumerate() {
            counts[qs] += 1;
            for (&p, &ks) in probs.row(i).iter().zip(key_shots) {
                out.values[qs][ks] += p.f64();
            }
        }
        for (row, &c) in out.values.iter_mut().zip(&counts) {
            if c > 0 {
                row.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        Ok(out)
    }

    /// Adds `other * weight` entrywise.
    pub fn accumulate(&mut self, other: &ShotHeatmap, weight: f64) -> Result<()> {
        if other.shots() != self.shots() {
            return shape_err("heatmaps of different shot counts");
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += weight * y;
            }
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.iter().map(|r| r.iter().sum()).collect()
    }

    /// Every diagonal entry exceeds every other entry of its row.
    pub fn is_diagonally_dominant(&self) -> bool {
        self.values
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().enumerate().all(|(j, &v)| j == i || r[i] > v))
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.shots();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.shots();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self.values.iter().flatten().sum();
        (total - self.mean_diagonal() * n as f64) / (n * n - n) as f64
    }

    pub fn to_csv(&self) -> String {
        let n = self.shots();
        let mut s = String::new();
        for j in 0..n {
            let _ = write!(s, ",shot_{j}");
        }
        s.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            let _ = write!(s, "shot_{i}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}
