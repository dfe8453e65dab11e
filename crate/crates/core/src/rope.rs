//! 1D and 3D rotary position embeddings.
//!
//! Feature pairs `(v[2i], v[2i+1])` are rotated as complex numbers by
//! `position * theta_i`. Angles are formed in 64-bit before rounding `cos`/`sin`
//! to the working precision, so large positions do not lose phase accuracy in
//! 32-bit mode.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Angles `theta_i = base^(-2(i-1)/d)` for `i = 1..=d/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryBasis<S> {
    dim: usize,
    base: f64,
    angles: Vec<S>,
}

impl<S: Scalar> RotaryBasis<S> {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return shape_err(format!("1D rotary dim must be even and >= 2, got {dim}"));
        }
        if base <= 1.0 {
            return shape_err(format!("rotary base must exceed 1, got {base}"));
        }
        let angles = (0..dim / 2)
            .map(|i| S::of(base.powf(-2.0 * i as f64 / dim as f64)))
            .collect();
        Ok(Self { dim, base, angles })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn angles(&self) -> &[S] {
        &self.angles
    }

    /// Rotation angle of every pair at `position`.
    pub fn pair_angles(&self, position: f64) -> Vec<f64> {
        self.angles.iter().map(|t| position * t.f64()).collect()
    }
}

/// Shorthand for [`RotaryBasis::new`].
pub fn make_basis_1d<S: Scalar>(dim: usize, base: f64) -> Result<RotaryBasis<S>> {
    RotaryBasis::new(dim, base)
}

/// Axis served by a 2×2 block of the 3D rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    T,
    H,
    W,
}

/// 3D rotary basis. Consecutive 2×2 blocks cycle through `(t, h, w)` for each
/// `theta_i`, `i = 1..=d/6`. Dimensions beyond `6 * (d/6)` are left unrotated;
/// only [`RotaryBasis3D::with_remainder`] permits such a remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryBasis3D<S> {
    dim: usize,
    base: f64,
    angles: Vec<S>,
}

impl<S: Scalar> RotaryBasis3D<S> {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 6 != 0 {
            return shape_err(format!("3D rotary dim must be a multiple of 6, got {dim}"));
        }
        Self::with_remainder(dim, base)
    }

    /// Head dims that are not a multiple of 6 (e.g. 32) rotate `dim / 6`
    /// block triples and pass the trailing `dim % 6` features through.
    pub fn with_remainder(dim: usize, base: f64) -> Result<Self> {
        if dim < 6 || dim % 2 != 0 {
            return shape_err(format!("3D rotary dim must be even and >= 6, got {dim}"));
        }
        if base <= 1.0 {
            return shape_err(format!("rotary base must exceed 1, got {base}"));
        }
        let angles = (0..dim / 6)
            .map(|i| S::of(base.powf(-2.0 * i as f64 / dim as f64)))
            .collect();
        Ok(Self { dim, base, angles })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn angles(&self) -> &[S] {
        &self.angles
    }

    /// Number of trailing features that are never rotated.
    pub fn remainder(&self) -> usize {
        self.dim - 6 * self.angles.len()
    }

    /// Axis and angle index of pair `p`, or `None` for remainder pairs.
    pub fn pair_role(&self, p: usize) -> Option<(Axis, usize)> {
        let i = p / 3;
        if i >= self.angles.len() {
            return None;
        }
        let axis = [Axis::T, Axis::H, Axis::W][p % 3];
        Some((axis, i))
    }

    /// Rotation angle of every pair (remainder pairs get 0).
    pub fn pair_angles(&self, t: f64, h: f64, w: f64) -> Vec<f64> {
        (0..self.dim / 2)
            .map(|p| match self.pair_role(p) {
                Some((Axis::T, i)) => t * self.angles[i].f64(),
                Some((Axis::H, i)) => h * self.angles[i].f64(),
                Some((Axis::W, i)) => w * self.angles[i].f64(),
                None => 0.0,
            })
            .collect()
    }
}

pub(crate) fn rotate_pairs<S: Scalar>(v: &[S], angles: &[f64]) -> Vec<S> {
    let mut out = v.to_vec();
    for (p, &a) in angles.iter().enumerate() {
        let (c, s) = (S::of(a.cos()), S::of(a.sin()));
        let (x, y) = (v[2 * p], v[2 * p + 1]);
        out[2 * p] = x * c - y * s;
        out[2 * p + 1] = x * s + y * c;
    }
    out
}

pub fn rope_1d<S: Scalar>(v: &[S], position: f64, basis: &RotaryBasis<S>) -> Result<Vec<S>> {
    if v.len() != basis.dim {
        return shape_err(format!(
            "rope_1d: vector has {} features, basis expects {}",
            v.len(),
            basis.dim
        ));
    }
    Ok(rotate_pairs(v, &basis.pair_angles(position)))
}

pub fn rope_3d<S: Scalar>(v: &[S], t: f64, h: f64, w: f64, basis: &RotaryBasis3D<S>) -> Result<Vec<S>> {
    if v.len() != basis.dim {
        return shape_err(format!(
            "rope_3d: vector has {} features, basis expects {}",
            v.len(),
            basis.dim
        ));
    }
    Ok(rotate_pairs(v, &basis.pair_angles(t, h, w)))
}

/// Precomputed per-row `cos`/`sin` for rotating every row of a matrix, each row
/// at its own position. Used on query/key projections inside attention.
#[derive(Clone, Debug)]
pub struct RotaryTable<S> {
    rows: usize,
    pairs: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> RotaryTable<S> {
    /// Builds a table from per-row angle lists (all of equal length).
    pub fn from_angles(angles: &[Vec<f64>]) -> Self {
        let rows = angles.len();
        let pairs = angles.first().map_or(0, Vec::len);
        let mut cos = Vec::with_capacity(rows * pairs);
        let mut sin = Vec::with_capacity(rows * pairs);
        for row in angles {
            assert_eq!(row.len(), pairs, "ragged rotary table");
            for &a in row {
                cos.push(S::of(a.cos()));
                sin.push(S::of(a.sin()));
            }
        }
        Self {
            rows,
            pairs,
            cos,
            sin,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Features covered by the table (`2 * pairs`).
    pub fn width(&self) -> usize {
        2 * self.pairs
    }

    pub(crate) fn check(&self, x: &Tensor<S>) -> Result<()> {
        if x.rows() != self.rows || x.cols() != self.width() {
            return shape_err(format!(
                "rotary table is {}x{}, input is {}x{}",
                self.rows,
                self.width(),
                x.rows(),
                x.cols()
            ));
        }
        Ok(())
    }

    /// Rotate (`inverse = false`) or un-rotate every row in place.
    pub(crate) fn apply_in_place(&self, data: &mut [S], inverse: bool) {
        let width = self.width();
        for r in 0..self.rows {
            let row = &mut data[r * width..(r + 1) * width];
            for p in 0..self.pairs {
                let c = self.cos[r * self.pairs + p];
                let s = if inverse {
                    -self.sin[r * self.pairs + p]
                } else {
                    self.sin[r * self.pairs + p]
                };
                let (x, y) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = x * c - y * s;
                row[2 * p + 1] = x * s + y * c;
            }
        }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check(x)?;
        let mut out = x.clone();
        self.apply_in_place(out.data_mut(), false);
        Ok(out)
    }
}
