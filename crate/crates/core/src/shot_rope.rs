//! Shot-aware rotary indexing.
//!
//! * **TcRoPE** rotates self-attention queries/keys with a 3D rotary embedding
//!   whose time coordinate is the global latent-frame index plus an extra jump
//!   of `j` at every shot boundary.
//! * **TaRoPE** rotates cross-attention visual queries and caption keys with a
//!   1D rotary embedding at position `s * k`, where `s` is the shot the query
//!   belongs to or the caption describes. Matched shot/caption pairs keep their
//!   vanilla logits exactly; mismatched pairs are damped.
//!
//! Neither mechanism owns trainable parameters.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rope::{rope_1d, rope_3d, RotaryBasis, RotaryBasis3D, RotaryTable};
use crate::scalar::Scalar;

/// Per-shot latent frame counts on a fixed `height × width` patch grid.
/// Tokens are ordered shot-major, then frame, then row, then column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotLayout {
    frames: Vec<usize>,
    height: usize,
    width: usize,
}

/// Grid position of one visual token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPos {
    pub shot: usize,
    pub t_local: usize,
    pub h: usize,
    pub w: usize,
}

impl ShotLayout {
    pub fn new(frames: Vec<usize>, height: usize, width: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("layout needs at least one shot".into()));
        }
        if let Some(s) = frames.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("shot {s} has zero frames")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Config("spatial grid must be non-empty".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
        })
    }

    pub fn shot_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn total_frames(&self) -> usize {
        self.frames.iter().sum()
    }

    pub fn token_count(&self) -> usize {
        self.total_frames() * self.tokens_per_frame()
    }

    /// Global latent-frame offset of shot `s` (sum of earlier shot lengths).
    pub fn frame_offset(&self, s: usize) -> usize {
        self.frames[..s].iter().sum()
    }

    /// Token index range `[start, end)` of shot `s`.
    pub fn token_span(&self, s: usize) -> (usize, usize) {
        let start = self.frame_offset(s) * self.tokens_per_frame();
        (start, start + self.frames[s] * self.tokens_per_frame())
    }

    /// Shot index of every token, in token order.
    pub fn token_shots(&self) -> Vec<usize> {
        self.positions().map(|p| p.shot).collect()
    }

    pub fn positions(&self) -> impl Iterator<Item = TokenPos> + '_ {
        self.frames.iter().enumerate().flat_map(move |(shot, &n)| {
            (0..n).flat_map(move |t_local| {
                (0..self.height).flat_map(move |h| {
                    (0..self.width).map(move |w| TokenPos {
                        shot,
                        t_local,
                        h,
                        w,
                    })
                })
            })
        })
    }

    /// Layout of the first `n` shots.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.frames[..n.min(self.frames.len())].to_vec(), self.height, self.width)
    }
}

/// `j`: extra temporal phase per shot boundary. `k`: caption mismatch
/// suppression scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotRopeParams {
    pub j: f64,
    pub k: f64,
}

impl Default for ShotRopeParams {
    fn default() -> Self {
        Self { j: 4.0, k: 6.0 }
    }
}

impl ShotRopeParams {
    pub fn new(j: f64, k: f64) -> Result<Self> {
        if !(j >= 0.0 && k >= 0.0 && j.is_finite() && k.is_finite()) {
            return Err(Error::Config(format!("j and k must be finite and >= 0, got j={j}, k={k}")));
        }
        Ok(Self { j, k })
    }
}

/// `off_s + t_local + s * j`.
pub fn effective_time_index(layout: &ShotLayout, s: usize, t_local: usize, j: f64) -> Result<f64> {
    if s >= layout.shot_count() {
        return Err(Error::Index(format!(
            "shot {s} out of range for {} shots",
            layout.shot_count()
        )));
    }
    if t_local >= layout.frames[s] {
        return Err(Error::Index(format!(
            "frame {t_local} out of range for shot {s} with {} frames",
            layout.frames[s]
        )));
    }
    Ok((layout.frame_offset(s) + t_local) as f64 + s as f64 * j)
}

#[allow(clippy::too_many_arguments)]
pub fn tcrope<S: Scalar>(
    v: &[S],
    t_local: usize,
    h: usize,
    w: usize,
    s: usize,
    layout: &ShotLayout,
    params: &ShotRopeParams,
    basis: &RotaryBasis3D<S>,
) -> Result<Vec<S>> {
    if h >= layout.height || w >= layout.width {
        return Err(Error::Index(format!("patch ({h},{w}) outside the grid")));
    }
    let t = effective_time_index(layout, s, t_local, params.j)?;
    rope_3d(v, t, h as f64, w as f64, basis)
}

pub fn tarope<S: Scalar>(v: &[S], s: usize, params: &ShotRopeParams, basis: &RotaryBasis<S>) -> Result<Vec<S>> {
    rope_1d(v, s as f64 * params.k, basis)
}

/// TcRoPE rotation table for every visual token of `layout`.
pub fn tcrope_table<S: Scalar>(layout: &ShotLayout, j: f64, basis: &RotaryBasis3D<S>) -> RotaryTable<S> {
    let angles: Vec<Vec<f64>> = layout
        .positions()
        .map(|p| {
            let t = (layout.frame_offset(p.shot) + p.t_local) as f64 + p.shot as f64 * j;
            basis.pair_angles(t, p.h as f64, p.w as f64)
        })
        .collect();
    RotaryTable::from_angles(&angles)
}

/// TaRoPE rotation table for rows tagged with shot indices.
pub fn tarope_table<S: Scalar>(shots: &[usize], k: f64, basis: &RotaryBasis<S>) -> RotaryTable<S> {
    let angles: Vec<Vec<f64>> = shots
        .iter()
        .map(|&s| basis.pair_angles(s as f64 * k))
        .collect();
    RotaryTable::from_angles(&angles)
}

pub(crate) fn check_head_dim(d_head: usize) -> Result<()> {
    if d_head < 6 || d_head % 2 != 0 {
        return shape_err(format!("head dim {d_head} too small or odd for rotary embedding"));
    }
    Ok(())
}
