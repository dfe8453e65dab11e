//! A small multi-shot diffusion transformer denoiser.
//!
//! Each block applies, with pre-layernorm residual branches: self-attention
//! over all visual tokens (TcRoPE), cross-attention to the concatenated
//! per-shot captions (TaRoPE), and a GELU feed-forward layer. A sinusoidal
//! embedding of the timestep, passed through a learned projection, is added to
//! every token before the first block. The output head starts at zero.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{multihead_on_tape, ref_visibility, AttentionVars};
use crate::autograd::{Tape, Var};
use crate::caption::CaptionBundle;
use crate::error::{shape_err, Error, Result};
use crate::rope::{RotaryBasis, RotaryBasis3D, RotaryTable};
use crate::scalar::Scalar;
use crate::shot_rope::{check_head_dim, tarope_table, tcrope_table, ShotLayout, ShotRopeParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "tcrope")]
    TcRope,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "full+refattn")]
    FullRefAttn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::TcRope, Variant::Full, Variant::FullRefAttn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::TcRope => "tcrope",
            Variant::Full => "full",
            Variant::FullRefAttn => "full+refattn",
        }
    }

    pub fn uses_tcrope(self) -> bool {
        !matches!(self, Variant::Vanilla)
    }

    pub fn uses_tarope(self) -> bool {
        matches!(self, Variant::Full | Variant::FullRefAttn)
    }

    pub fn uses_ref_attn(self) -> bool {
        matches!(self, Variant::FullRefAttn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected vanilla, tcrope, full, full+refattn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_token: usize,
    pub d_text: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub shot_rope: ShotRopeParams,
    pub variant: Variant,
    pub caption_dropout: f64,
    pub rope_base: f64,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_token: 128,
            d_text: 64,
            d_model: 128,
            blocks: 4,
            heads: 4,
            ffn_mult: 4,
            shot_rope: ShotRopeParams::default(),
            variant: Variant::Full,
            caption_dropout: 0.1,
            rope_base: 10000.0,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_token == 0 || self.d_text == 0 || self.blocks == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        check_head_dim(self.d_head()).map_err(|e| Error::Config(e.to_string()))?;
        ShotRopeParams::new(self.shot_rope.j, self.shot_rope.k)?;
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::Config(format!("caption dropout {} outside [0, 1]", self.caption_dropout)));
        }
        if !(self.rope_base > 1.0) || !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("rope_base > 1, ln_eps > 0 and init_std >= 0 required".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Phase shift actually applied by this variant.
    pub fn effective_j(&self) -> f64 {
        if self.variant.uses_tcrope() {
            self.shot_rope.j
        } else {
            0.0
        }
    }

    /// Suppression scale actually applied by this variant.
    pub fn effective_k(&self) -> f64 {
        if self.variant.uses_tarope() {
            self.shot_rope.k
        } else {
            0.0
        }
    }
}

const ATTN_NAMES: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
const PER_BLOCK: usize = 20;
const STEM: usize = 4;

/// Parameter names and shapes in checkpoint order.
pub fn param_shapes(c: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let f = d * c.ffn_mult;
    let mut out = vec![
        ("embed.w".to_string(), vec![c.d_token, d]),
        ("embed.b".to_string(), vec![d]),
        ("time.w".to_string(), vec![d, d]),
        ("time.b".to_string(), vec![d]),
    ];
    for b in 0..c.blocks {
        for (prefix, d_ctx) in [("self", d), ("cross", c.d_text)] {
            for name in ATTN_NAMES {
                let shape = match name {
                    "wq" | "wo" => vec![d, d],
                    "wk" | "wv" => vec![d_ctx, d],
                    _ => vec![d],
                };
                out.push((format!("blocks.{b}.{prefix}.{name}"), shape));
            }
        }
        out.push((format!("blocks.{b}.ffn.w1"), vec![d, f]));
        out.push((format!("blocks.{b}.ffn.b1"), vec![f]));
        out.push((format!("blocks.{b}.ffn.w2"), vec![f, d]));
        out.push((format!("blocks.{b}.ffn.b2"), vec![d]));
    }
    out.push(("head.w".to_string(), vec![d, c.d_token]));
    out.push(("head.b".to_string(), vec![c.d_token]));
    out.push(("null_caption".to_string(), vec![c.d_text]));
    out
}

fn truncated_normal<R: Rng>(std: f64, rng: &mut R) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

/// `[sin(a_i), cos(a_i)]` with `a_i = 1000 tau * 10000^(-i / (d/2))`.
pub fn timestep_embedding<S: Scalar>(tau: f64, d: usize) -> Tensor<S> {
    let half = d / 2;
    let mut row = vec![S::zero(); d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = tau * 1000.0 * freq;
        row[i] = S::of(a.sin());
        row[half + i] = S::of(a.cos());
    }
    Tensor::new(vec![1, d], row).expect("row shape")
}

/// Tape handles produced by one forward pass.
pub struct ForwardTrace {
    pub out: Var,
    /// Self-attention probabilities, `blocks × heads`.
    pub self_probs: Vec<Var>,
    /// Cross-attention probabilities, `blocks × heads`.
    pub cross_probs: Vec<Var>,
    /// Shot index of each caption row.
    pub context_shots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<S> {
    config: DenoiserConfig,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
}

impl<S: Scalar> Denoiser<S> {
    /// Truncated-normal projections, zero biases, zero output head, zero null
    /// caption.
    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, dims) in shapes {
            let random = dims.len() == 2 && !name.starts_with("head.");
            let t = if random {
                Tensor::from_fn(&dims, |_| S::of(truncated_normal(config.init_std, rng)))
            } else {
                Tensor::zeros(&dims)
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    /// Builds a model from named tensors; names and shapes must match the
    /// configuration exactly.
    pub fn from_params(config: DenoiserConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for ((name, dims), (got_name, t)) in shapes.into_iter().zip(named) {
            if name != got_name || t.dims() != dims.as_slice() {
                return Err(Error::Format(format!(
                    "expected tensor {name} {dims:?}, found {got_name} {:?}",
                    t.dims()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Same weights under a different configuration of rotary settings.
    pub fn with_config(&self, config: DenoiserConfig) -> Result<Self> {
        let named = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        Self::from_params(config, named)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// `(name, shape)` of every tensor, in checkpoint order.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.clone(), t.dims().to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Puts every parameter on the tape, trainable or constant.
    pub fn to_tape(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn attn_vars(vars: &[Var], base: usize) -> AttentionVars {
        AttentionVars {
            wq: vars[base],
            bq: vars[base + 1],
            wk: vars[base + 2],
            bk: vars[base + 3],
            wv: vars[base + 4],
            bv: vars[base + 5],
            wo: vars[base + 6],
            bo: vars[base + 7],
        }
    }

    /// Velocity prediction for one sample. `vars` come from [`Self::to_tape`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        z: Var,
        tau: f64,
        captions: &CaptionBundle<S>,
        layout: &ShotLayout,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        if vars.len() != self.params.len() {
            return shape_err("parameter handle count does not match the model");
        }
        let zv = tape.value(z);
        if zv.dims() != [layout.token_count(), c.d_token] {
            return shape_err(format!(
                "input of shape {:?}, expected [{}, {}]",
                zv.dims(),
                layout.token_count(),
                c.d_token
            ));
        }
        if captions.shot_count() != layout.shot_count() {
            return Err(Error::Config(format!(
                "{} captions for {} shots",
                captions.shot_count(),
                layout.shot_count()
            )));
        }
        if captions.width() != c.d_text {
            return shape_err(format!("captions have width {}, model expects {}", captions.width(), c.d_text));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("timestep {tau} outside [0, 1]")));
        }

        let d_head = c.d_head();
        let basis3 = RotaryBasis3D::<S>::with_remainder(d_head, c.rope_base)?;
        let self_table = Arc::new(tcrope_table(layout, c.effective_j(), &basis3));
        let token_shots = layout.token_shots();
        let (ctx, context_shots, dropped) = captions.flatten();
        let (q_table, k_table): (Option<Arc<RotaryTable<S>>>, Option<Arc<RotaryTable<S>>>) = if c.effective_k() != 0.0 {
            let basis1 = RotaryBasis::<S>::new(d_head, c.rope_base)?;
            (
                Some(Arc::new(tarope_table(&token_shots, c.effective_k(), &basis1))),
                Some(Arc::new(tarope_table(&context_shots, c.effective_k(), &basis1))),
            )
        } else {
            (None, None)
        };
        let (self_vis, cross_vis) = if c.variant.uses_ref_attn() && layout.shot_count() > 1 {
            (
                Some(Arc::new(ref_visibility(&token_shots, &token_shots))),
                Some(Arc::new(ref_visibility(&token_shots, &context_shots))),
            )
        } else {
            (None, None)
        };

        let null_idx = vars.len() - 1;
        let mut ctx_var = tape.constant(ctx);
        if dropped.iter().any(|&d| d) {
            ctx_var = tape.replace_rows(ctx_var, vars[null_idx], Arc::new(dropped))?;
        }

        let eps = S::of(c.ln_eps);
        let mut x = tape.linear(z, vars[0], vars[1])?;
        let temb = tape.constant(timestep_embedding(tau, c.d_model));
        let temb = tape.linear(temb, vars[2], vars[3])?;
        x = tape.add_row(x, temb)?;

        let mut self_probs = Vec::new();
        let mut cross_probs = Vec::new();
        for b in 0..c.blocks {
            let base = STEM + b * PER_BLOCK;
            let y = tape.layernorm(x, eps)?;
            let sa = multihead_on_tape(
                tape,
                y,
                y,
                &Self::attn_vars(vars, base),
                c.heads,
                Some(&self_table),
                Some(&self_table),
                self_vis.as_ref(),
            )?;
            x = tape.add(x, sa.out)?;
            self_probs.extend(sa.probs);

            let y = tape.layernorm(x, eps)?;
            let ca = multihead_on_tape(
                tape,
                y,
                ctx_var,
                &Self::attn_vars(vars, base + 8),
                c.heads,
                q_table.as_ref(),
                k_table.as_ref(),
                cross_vis.as_ref(),
            )?;
            x = tape.add(x, ca.out)?;
            cross_probs.extend(ca.probs);

            let y = tape.layernorm(x, eps)?;
            let h = tape.linear(y, vars[base + 16], vars[base + 17])?;
            let h = tape.gelu(h)?;
            let h = tape.linear(h, vars[base + 18], vars[base + 19])?;
            x = tape.add(x, h)?;
        }
        let head = STEM + c.blocks * PER_BLOCK;
        let y = tape.layernorm(x, eps)?;
        let out = tape.linear(y, vars[head], vars[head + 1])?;
        Ok(ForwardTrace {
            out,
            self_probs,
            cross_probs,
            context_shots,
        })
    }

    /// Velocity prediction without gradient tracking.
    pub fn forward(&self, z: &Tensor<S>, tau: f64, captions: &CaptionBundle<S>, layout: &ShotLayout) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let zv = tape.constant(z.clone());
        let tr = self.forward_on_tape(&mut tape, &vars, zv, tau, captions, layout)?;
        Ok(tape.value(tr.out).clone())
    }
}

/// Mean squared error between `pred` and the velocity target `eps - z`.
pub fn rf_loss<S: Scalar>(pred: &Tensor<S>, z: &Tensor<S>, eps: &Tensor<S>) -> Result<S> {
    let target = eps.sub(z)?;
    if pred.dims() != target.dims() {
        return shape_err(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    let n = S::of(pred.numel() as f64);
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .fold(S::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
        / n)
}

/// Marks each shot's caption as dropped with probability `p`, independently.
/// Captions already dropped stay dropped.
pub fn apply_caption_dropout<S: Scalar, R: Rng>(captions: &CaptionBundle<S>, p: f64, rng: &mut R) -> Result<CaptionBundle<S>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    let flags: Vec<bool> = captions
        .entries()
        .iter()
        .map(|e| {
            let draw = rng.gen::<f64>() < p;
            e.dropped || draw
        })
        .collect();
    captions.with_dropped(&flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::CaptionEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: Variant) -> DenoiserConfig {
        DenoiserConfig {
            d_token: 12,
            d_text: 8,
            d_model: 24,
            blocks: 2,
            heads: 2,
            variant,
            ..DenoiserConfig::default()
        }
    }

    fn captions(shots: usize, rng: &mut ChaCha8Rng) -> CaptionBundle<f32> {
        CaptionBundle::new(
            (0..shots)
                .map(|s| CaptionEntry {
                    shot: s,
                    tokens: Tensor::from_fn(&[2, 8], |_| rng.gen_range(-1.0..1.0)),
                    dropped: false,
                })
                .collect(),
        )
        .unwrap()
    }

    fn randomize_head(m: &mut Denoiser<f32>, rng: &mut ChaCha8Rng) {
        for name in ["head.w", "head.b", "null_caption"] {
            let p = m.param_mut(name).unwrap();
            p.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
        }
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Denoiser::<f32>::init(tiny(Variant::Full), &mut rng).unwrap();
        let layout = ShotLayout::new(vec![2, 1], 2, 2).unwrap();
        let z = Tensor::from_fn(&[12, 12], |i| (i as f32 * 0.1).sin());
        let v = m.forward(&z, 0.7, &captions(2, &mut rng), &layout).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vanilla_matches_full_with_zero_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Denoiser::<f32>::init(tiny(Variant::Vanilla), &mut rng).unwrap();
        randomize_head(&mut m, &mut rng);
        let mut cfg = tiny(Variant::Full);
        cfg.shot_rope = ShotRopeParams::new(0.0, 0.0).unwrap();
        let full = m.with_config(cfg).unwrap();
        let layout = ShotLayout::new(vec![2, 3], 2, 2).unwrap();
        let z = Tensor::from_fn(&[20, 12], |i| (i as f32 * 0.37).cos());
        let caps = captions(2, &mut rng);
        assert_eq!(
            m.forward(&z, 0.3, &caps, &layout).unwrap(),
            full.forward(&z, 0.3, &caps, &layout).unwrap()
        );
    }

    #[test]
    fn caption_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Denoiser::<f32>::init(tiny(Variant::Full), &mut rng).unwrap();
        randomize_head(&mut m, &mut rng);
        let layout = ShotLayout::new(vec![1, 2, 1], 2, 2).unwrap();
        let z = Tensor::from_fn(&[16, 12], |i| (i as f32 * 0.21).sin());
        let caps = captions(3, &mut rng);
        let a = m.forward(&z, 0.5, &caps, &layout).unwrap();
        let b = m.forward(&z, 0.5, &caps.reordered(&[2, 0, 1]).unwrap(), &layout).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn census_is_variant_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let censuses: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| Denoiser::<f32>::init(tiny(v), &mut rng).unwrap().census())
            .collect();
        assert!(censuses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn loss_and_dropout_basics() {
        let z = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64);
        let e = Tensor::<f64>::from_fn(&[3, 2], |i| (i * i) as f64 * 0.5);
        let target = e.sub(&z).unwrap();
        assert_eq!(rf_loss(&target, &z, &e).unwrap(), 0.0);
        let mean_sq = target.data().iter().map(|x| x * x).sum::<f64>() / 6.0;
        assert_eq!(rf_loss(&Tensor::zeros(&[3, 2]), &z, &e).unwrap(), mean_sq);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let caps = captions(3, &mut rng);
        assert_eq!(apply_caption_dropout(&caps, 0.0, &mut rng).unwrap(), caps);
        assert!(apply_caption_dropout(&caps, 1.0, &mut rng)
            .unwrap()
            .entries()
            .iter()
            .all(|e| e.dropped));
        assert!(apply_caption_dropout(&caps, 1.5, &mut rng).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("simple".parse::<Variant>().is_err());
    }
}
