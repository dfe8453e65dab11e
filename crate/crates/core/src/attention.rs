//! Attention kernels: plain scaled dot-product attention, multi-shot
//! self-attention with TcRoPE, multi-shot cross-attention with TaRoPE, and the
//! reference-shot attention used for unbounded shot generation.
//!
//! All kernels run on the autograd [`Tape`] so the model and the standalone
//! functions share one implementation. No kernel masks attention in the
//! ordinary multi-shot mode; inter-shot interaction is only damped by rotary
//! distance. The one visibility restriction is reference-shot mode, where shot
//! 0 queries see only shot 0 keys.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::caption::CaptionBundle;
use crate::error::{shape_err, Error, Result};
use crate::rope::{RotaryBasis, RotaryBasis3D, RotaryTable};
use crate::scalar::Scalar;
use crate::shot_rope::{tarope_table, tcrope_table, ShotLayout, ShotRopeParams};
use crate::tensor::Tensor;

/// Projection weights of one attention sublayer (`x · W + b` convention).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

impl<S: Scalar> AttentionWeights<S> {
    /// Normal(0, std) weights, zero biases. Queries read `d_query_in`
    /// features, keys and values read `d_context_in`.
    pub fn random<R: Rng>(d_query_in: usize, d_context_in: usize, d_model: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut w = |r: usize, c: usize| Tensor::from_fn(&[r, c], |_| S::of(normal.sample(rng)));
        Self {
            wq: w(d_query_in, d_model),
            wk: w(d_context_in, d_model),
            wv: w(d_context_in, d_model),
            wo: w(d_model, d_model),
            bq: Tensor::zeros(&[d_model]),
            bk: Tensor::zeros(&[d_model]),
            bv: Tensor::zeros(&[d_model]),
            bo: Tensor::zeros(&[d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.cols()
    }

    pub fn to_tape(&self, tape: &mut Tape<S>) -> AttentionVars {
        AttentionVars {
            wq: tape.constant(self.wq.clone()),
            bq: tape.constant(self.bq.clone()),
            wk: tape.constant(self.wk.clone()),
            bk: tape.constant(self.bk.clone()),
            wv: tape.constant(self.wv.clone()),
            bv: tape.constant(self.bv.clone()),
            wo: tape.constant(self.wo.clone()),
            bo: tape.constant(self.bo.clone()),
        }
    }
}

/// Tape handles for [`AttentionWeights`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `softmax(q kᵀ / sqrt(d)) v`, optionally restricted per row. Returns the
/// output and the probability matrix.
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    visible: Option<&Arc<Vec<bool>>>,
) -> Result<(Var, Var)> {
    let d = tape.value(q).cols();
    if tape.value(k).cols() != d {
        return shape_err(format!("query dim {d} vs key dim {}", tape.value(k).cols()));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return shape_err("keys and values need the same row count");
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, S::one() / S::of(d as f64).sqrt())?;
    let probs = match visible {
        Some(mask) => tape.masked_softmax_rows(scores, mask.clone())?,
        None => tape.softmax_rows(scores)?,
    };
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// Output projection plus the per-head probability matrices.
pub struct MultiHeadOut {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// Multi-head attention. Each head's query/key slice is rotated by the given
/// table (one row per query / key token, `d_head` wide).
#[allow(clippy::too_many_arguments)]
pub fn multihead_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x_query: Var,
    x_context: Var,
    w: &AttentionVars,
    heads: usize,
    q_table: Option<&Arc<RotaryTable<S>>>,
    k_table: Option<&Arc<RotaryTable<S>>>,
    visible: Option<&Arc<Vec<bool>>>,
) -> Result<MultiHeadOut> {
    let q = tape.linear(x_query, w.wq, w.bq)?;
    let k = tape.linear(x_context, w.wk, w.bk)?;
    let v = tape.linear(x_context, w.wv, w.bv)?;
    let d_model = tape.value(q).cols();
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!("{d_model} features do not split into {heads} heads")));
    }
    let d_head = d_model / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut qh = tape.slice_cols(q, h * d_head, d_head)?;
        let mut kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        if let Some(t) = q_table {
            qh = tape.rotate(qh, t.clone())?;
        }
        if let Some(t) = k_table {
            kh = tape.rotate(kh, t.clone())?;
        }
        let (o, p) = attend(tape, qh, kh, vh, visible)?;
        outs.push(o);
        probs.push(p);
    }
    let cat = tape.concat_cols(&outs)?;
    let out = tape.linear(cat, w.wo, w.bo)?;
    Ok(MultiHeadOut { out, probs })
}

/// Visibility for reference-shot attention: queries of shot 0 see only keys of
/// shot 0; queries of later shots see every key.
pub fn ref_visibility(query_shots: &[usize], key_shots: &[usize]) -> Vec<bool> {
    let mut vis = Vec::with_capacity(query_shots.len() * key_shots.len());
    for &qs in query_shots {
        for &ks in key_shots {
            vis.push(qs != 0 || ks == 0);
        }
    }
    vis
}

fn run_plain<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    visible: Option<&Arc<Vec<bool>>>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (o, _) = attend(&mut tape, qv, kv, vv, visible)?;
    Ok(tape.value(o).clone())
}

pub fn scaled_dot_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    run_plain(q, k, v, None)
}

/// Self-attention where shot 0 attends only to itself and later shots attend
/// to all shots. Rows of `q`, `k`, `v` follow `layout` token order.
pub fn ref_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, layout: &ShotLayout) -> Result<Tensor<S>> {
    let n = layout.token_count();
    if q.rows() != n || k.rows() != n || v.rows() != n {
        return shape_err(format!(
            "ref_attention: layout has {n} tokens, got q={} k={} v={}",
            q.rows(),
            k.rows(),
            v.rows()
        ));
    }
    let shots = layout.token_shots();
    let vis = Arc::new(ref_visibility(&shots, &shots));
    run_plain(q, k, v, Some(&vis))
}

/// Self-attention sublayer over all shots with TcRoPE on queries and keys.
#[allow(clippy::too_many_arguments)]
pub fn multishot_self_attention<S: Scalar>(
    tokens: &Tensor<S>,
    layout: &ShotLayout,
    params: &ShotRopeParams,
    basis: &RotaryBasis3D<S>,
    weights: &AttentionWeights<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    if tokens.rows() != layout.token_count() {
        return shape_err(format!(
            "{} tokens for a layout of {}",
            tokens.rows(),
            layout.token_count()
        ));
    }
    check_head_basis(weights.d_model(), heads, basis.dim())?;
    let table = Arc::new(tcrope_table(layout, params.j, basis));
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let w = weights.to_tape(&mut tape);
    let out = multihead_on_tape(&mut tape, x, x, &w, heads, Some(&table), Some(&table), None)?;
    Ok(tape.value(out.out).clone())
}

/// Cross-attention sublayer from visual tokens to the concatenation of all
/// captions, with TaRoPE on visual queries (by token shot) and caption keys
/// (by caption shot).
#[allow(clippy::too_many_arguments)]
pub fn multishot_cross_attention<S: Scalar>(
    tokens: &Tensor<S>,
    captions: &CaptionBundle<S>,
    layout: &ShotLayout,
    params: &ShotRopeParams,
    basis: &RotaryBasis<S>,
    weights: &AttentionWeights<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    if captions.shot_count() != layout.shot_count() {
        return Err(Error::Config(format!(
            "{} captions for {} shots",
            captions.shot_count(),
            layout.shot_count()
        )));
    }
    if tokens.rows() != layout.token_count() {
        return shape_err("token count does not match layout");
    }
    check_head_basis(weights.d_model(), heads, basis.dim())?;
    let (ctx, ctx_shots, _) = captions.flatten();
    let q_table = Arc::new(tarope_table(&layout.token_shots(), params.k, basis));
    let k_table = Arc::new(tarope_table(&ctx_shots, params.k, basis));
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let c = tape.constant(ctx);
    let w = weights.to_tape(&mut tape);
    let out = multihead_on_tape(&mut tape, x, c, &w, heads, Some(&q_table), Some(&k_table), None)?;
    Ok(tape.value(out.out).clone())
}

fn check_head_basis(d_model: usize, heads: usize, basis_dim: usize) -> Result<()> {
    if heads == 0 || d_model % heads != 0 || d_model / heads != basis_dim {
        return shape_err(format!(
            "basis dim {basis_dim} must equal head dim of {d_model} features over {heads} heads"
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::CaptionEntry;
    use crate::rope::DEFAULT_BASE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(dims, |_| n.sample(rng) as f32)
    }

    fn naive(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Tensor<f32> {
        let d = q.cols() as f64;
        let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
        for i in 0..q.rows() {
            let s: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|c| q.get2(i, c) as f64 * k.get2(j, c) as f64).sum::<f64>() / d.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..v.cols() {
                let val: f64 = (0..k.rows()).map(|j| (s[j] - m).exp() / z * v.get2(j, c) as f64).sum();
                out.row_mut(i)[c] = val as f32;
            }
        }
        out
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = randn(&[4, 6], &mut rng);
        let k = randn(&[1, 6], &mut rng);
        let v = randn(&[1, 3], &mut rng);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            assert_eq!(o.row(i), v.row(0));
        }
    }

    #[test]
    fn orthonormal_keys_with_large_scale_pick_matching_value() {
        let q = Tensor::<f32>::identity(4).scale(100.0);
        let k = Tensor::<f32>::identity(4).scale(100.0);
        let v = Tensor::<f32>::from_fn(&[4, 2], |i| i as f32);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-4);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = randn(&[5, 8], &mut rng);
        let k = randn(&[7, 8], &mut rng);
        let v = randn(&[7, 4], &mut rng);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(o.max_abs_diff(&naive(&q, &k, &v)) <= 1e-5);
    }

    #[test]
    fn ref_attention_single_shot_is_plain() {
        let layout = ShotLayout::new(vec![3], 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = randn(&[6, 8], &mut rng);
        let k = randn(&[6, 8], &mut rng);
        let v = randn(&[6, 8], &mut rng);
        assert_eq!(
            ref_attention(&q, &k, &v, &layout).unwrap(),
            scaled_dot_attention(&q, &k, &v).unwrap()
        );
    }

    #[test]
    fn ref_attention_isolates_shot_zero() {
        let layout = ShotLayout::new(vec![2, 3, 1], 2, 2).unwrap();
        let n = layout.token_count();
        let (_, end0) = layout.token_span(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = randn(&[n, 8], &mut rng);
        let k = randn(&[n, 8], &mut rng);
        let v = randn(&[n, 8], &mut rng);
        let base = ref_attention(&q, &k, &v, &layout).unwrap();

        // Equal to plain attention over shot 0 alone.
        let solo = scaled_dot_attention(
            &q.slice_rows(0, end0).unwrap(),
            &k.slice_rows(0, end0).unwrap(),
            &v.slice_rows(0, end0).unwrap(),
        )
        .unwrap();
        assert_eq!(base.slice_rows(0, end0).unwrap(), solo);

        for which in 0..3 {
            let mut tensors = [q.clone(), k.clone(), v.clone()];
            for x in tensors[which].data_mut()[end0 * 8..].iter_mut() {
                *x = *x * 3.0 - 1.0;
            }
            let [q2, k2, v2] = tensors;
            let out = ref_attention(&q2, &k2, &v2, &layout).unwrap();
            assert_eq!(out.slice_rows(0, end0).unwrap(), base.slice_rows(0, end0).unwrap());
            assert_ne!(out, base);
        }
    }

    fn captions(rng: &mut ChaCha8Rng, shots: usize, width: usize) -> CaptionBundle<f32> {
        CaptionBundle::new(
            (0..shots)
                .map(|s| CaptionEntry {
                    shot: s,
                    tokens: randn(&[2, width], rng),
                    dropped: false,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_phase_shift_equals_vanilla_rope_attention() {
        let layout = ShotLayout::new(vec![2, 2], 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[layout.token_count(), 16], &mut rng);
        let w = AttentionWeights::<f32>::random(16, 16, 64, 0.2, &mut rng);
        let basis = RotaryBasis3D::with_remainder(32, DEFAULT_BASE).unwrap();
        let shifted = multishot_self_attention(&x, &layout, &ShotRopeParams::new(0.0, 6.0).unwrap(), &basis, &w, 2).unwrap();

        // Vanilla: 3D rope on plain concatenated time.
        let angles: Vec<Vec<f64>> = layout
            .positions()
            .map(|p| basis.pair_angles((layout.frame_offset(p.shot) + p.t_local) as f64, p.h as f64, p.w as f64))
            .collect();
        let table = Arc::new(RotaryTable::from_angles(&angles));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = w.to_tape(&mut tape);
        let out = multihead_on_tape(&mut tape, xv, xv, &wv, 2, Some(&table), Some(&table), None).unwrap();
        assert_eq!(tape.value(out.out), &shifted);

        let single = ShotLayout::new(vec![4], 2, 2).unwrap();
        let vanilla = multishot_self_attention(&x, &single, &ShotRopeParams::default(), &basis, &w, 2).unwrap();
        assert_eq!(vanilla, shifted);
    }

    #[test]
    fn zero_suppression_equals_unrotated_cross_attention() {
        let layout = ShotLayout::new(vec![1, 2, 1], 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[layout.token_count(), 16], &mut rng);
        let caps = captions(&mut rng, 3, 12);
        let w = AttentionWeights::<f32>::random(16, 12, 32, 0.2, &mut rng);
        let basis = RotaryBasis::new(16, DEFAULT_BASE).unwrap();
        let with_k0 = multishot_cross_attention(&x, &caps, &layout, &ShotRopeParams::new(4.0, 0.0).unwrap(), &basis, &w, 2).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = tape.constant(caps.flatten().0);
        let wv = w.to_tape(&mut tape);
        let out = multihead_on_tape(&mut tape, xv, cv, &wv, 2, None, None, None).unwrap();
        assert_eq!(tape.value(out.out), &with_k0);
    }

    #[test]
    fn caption_count_must_match_shots() {
        let layout = ShotLayout::new(vec![1, 1], 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[2, 8], &mut rng);
        let caps = captions(&mut rng, 3, 8);
        let w = AttentionWeights::<f32>::random(8, 8, 16, 0.2, &mut rng);
        let basis = RotaryBasis::new(8, DEFAULT_BASE).unwrap();
        let r = multishot_cross_attention(&x, &caps, &layout, &ShotRopeParams::default(), &basis, &w, 2);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
