//! Training, sampling and evaluation.
//!
//! Training follows the rectified-flow objective: `z_tau = (1 - tau) z + tau eps`
//! with target velocity `eps - z`, timesteps drawn from a shifted discrete
//! schedule, and AdamW updates. Sampling integrates the learned velocity from
//! pure noise at `tau = 1` to `tau = 0` with Euler steps and classifier-free
//! guidance, where the unconditional branch drops every shot's caption.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ScalarFn, Tape, Var};
use crate::caption::CaptionBundle;
use crate::checkpoint::{load_records, save_records};
use crate::data::{cosine, make_batch_with_rng, ShotPrompt, SyntheticWorld, TokenField, WorldConfig};
use crate::error::{shape_err, Error, Result};
use crate::model::{apply_caption_dropout, Denoiser, DenoiserConfig, Variant};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::shot_rope::{ShotLayout, ShotRopeParams};
use crate::suppression::ShotHeatmap;
use crate::tensor::Tensor;

/// Upper bound on worker threads: `SHOTROPE_THREADS` if set, else the
/// machine's available parallelism.
pub fn thread_limit() -> usize {
    std::env::var("SHOTROPE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Order-preserving map over independent work items on up to
/// [`thread_limit`] threads.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let threads = thread_limit().min(items.len()).max(1);
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut buckets: Vec<Vec<(usize, T)>> = (0..threads).map(|_| Vec::new()).collect();
    for (i, it) in items.into_iter().enumerate() {
        buckets[i % threads].push((i, it));
    }
    let f = &f;
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|b| scope.spawn(move || b.into_iter().map(|(i, t)| (i, f(t))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_timesteps: usize,
    pub train_shift: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub shot_count_range: (usize, usize),
    pub shot_len_range: (usize, usize),
    pub smoothing_window: usize,
    /// Prepend the sample's identity token to every caption (personalized
    /// fine-tuning).
    pub identity_conditioning: bool,
    /// Probability of replacing the identity token with zeros.
    pub identity_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 0.001,
            train_timesteps: 1000,
            train_shift: 5.0,
            init_seed: 0,
            data_seed: 1,
            shot_count_range: (1, 4),
            shot_len_range: (2, 6),
            smoothing_window: 50,
            identity_conditioning: false,
            identity_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.train_timesteps == 0 || self.smoothing_window == 0 {
            return bad("batch_size, train_timesteps and smoothing_window must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0");
        }
        if !(self.train_shift >= 1.0) {
            return bad("train_shift must be >= 1");
        }
        let (a, b) = self.shot_count_range;
        let (c, d) = self.shot_len_range;
        if a == 0 || a > b || c == 0 || c > d {
            return bad("shot ranges must be non-empty and start at >= 1");
        }
        if !(0.0..=1.0).contains(&self.identity_dropout) {
            return bad("identity_dropout outside [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub steps: usize,
    pub shift: f64,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            shift: 5.0,
            guidance: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub shots: usize,
    pub shot_len_range: (usize, usize),
    /// Heatmaps are taken at the first sampling step with `tau` at or below
    /// this value.
    pub heatmap_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            seed: 999,
            shots: 3,
            shot_len_range: (2, 6),
            heatmap_tau: 0.5,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_token != self.world.d_token || self.model.d_text != self.world.d_text {
            return Err(Error::Config(format!(
                "model widths ({}, {}) differ from world widths ({}, {})",
                self.model.d_token, self.model.d_text, self.world.d_token, self.world.d_text
            )));
        }
        Ok(())
    }

    /// The reduced configuration used for variant comparisons on one CPU core.
    pub fn ablation_default() -> Self {
        let mut c = RunConfig::default();
        c.world.d_token = 64;
        c.world.height = 2;
        c.world.width = 2;
        c.model.d_token = 64;
        c.model.d_model = 64;
        c.model.heads = 2;
        c.model.blocks = 2;
        c.train.batch_size = 4;
        c.train.steps = 6000;
        c
    }
}

/// `tau' = s u / (1 + (s - 1) u)` on `n + 1` points `u = 1, 1 - 1/n, ..., 0`.
pub fn shift_timesteps(n_steps: usize, shift: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::Config("at least one sampling step is required".into()));
    }
    if !(shift >= 1.0) || !shift.is_finite() {
        return Err(Error::Config(format!("shift must be finite and >= 1, got {shift}")));
    }
    Ok((0..=n_steps)
        .map(|i| {
            let u = (n_steps - i) as f64 / n_steps as f64;
            shift * u / (1.0 + (shift - 1.0) * u)
        })
        .collect())
}

pub fn shift_time(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

/// `v_uncond + g (v_cond - v_uncond)`; exactly `v_cond` when `g = 1`.
pub fn cfg_velocity<S: Scalar>(v_cond: &Tensor<S>, v_uncond: &Tensor<S>, g: f64) -> Result<Tensor<S>> {
    if v_cond.dims() != v_uncond.dims() {
        return shape_err(format!("guidance on {:?} and {:?}", v_cond.dims(), v_uncond.dims()));
    }
    if g == 1.0 {
        return Ok(v_cond.clone());
    }
    let gs = S::of(g);
    v_cond.zip_with(v_uncond, |c, u| u + gs * (c - u))
}

/// Per-step training loss with its trailing mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub window: usize,
    pub losses: Vec<f64>,
}

impl LossLog {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            losses: Vec::new(),
        }
    }

    /// Mean of the `window` losses ending at 1-based `step`.
    pub fn smoothed(&self, step: usize) -> f64 {
        let end = step.min(self.losses.len());
        let start = end.saturating_sub(self.window);
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,smoothed\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, l, self.smoothed(i + 1));
        }
        s
    }
}

pub struct TrainOutput<S> {
    pub model: Denoiser<S>,
    pub log: LossLog,
}

pub fn init_model<S: Scalar>(config: &DenoiserConfig, seed: u64) -> Result<Denoiser<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Denoiser::init(config.clone(), &mut rng)
}

fn gaussian_tensor<S: Scalar, R: Rng>(dims: &[usize], rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(dims, |_| S::of(StandardNormal.sample(rng)))
}

/// Captions with the identity token of `id_index` prepended; the token is all
/// zeros when `null_identity` is set.
pub fn identity_captions<S: Scalar>(
    world: &SyntheticWorld,
    captions: &CaptionBundle<S>,
    id_index: usize,
    null_identity: bool,
) -> Result<CaptionBundle<S>> {
    let emb = if null_identity {
        vec![S::zero(); world.config().d_text]
    } else {
        world.identity_embedding(id_index)?
    };
    captions.condition_identity(&emb)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(_) => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Trains `model` in place on freshly drawn synthetic batches.
pub fn train<S: Scalar>(
    model: Denoiser<S>,
    world: &SyntheticWorld,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutput<S>> {
    config.validate()?;
    let mut model = model;
    let mut opt = AdamW::new(model.params(), config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    let mut log = LossLog::new(config.smoothing_window);
    let p_drop = model.config().caption_dropout;
    let inv_b = S::one() / S::of(config.batch_size as f64);
    for step in 1..=config.steps {
        let batch = make_batch_with_rng::<S, _>(
            world,
            config.batch_size,
            config.shot_count_range,
            config.shot_len_range,
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let vars = model.to_tape(&mut tape, true);
        let mut total: Option<Var> = None;
        for sample in &batch {
            let mut caps = apply_caption_dropout(&sample.captions, p_drop, &mut rng)?;
            if config.identity_conditioning {
                let null_id = rng.gen::<f64>() < config.identity_dropout;
                caps = identity_captions(world, &caps, sample.id_index, null_id)?;
            }
            let z = &sample.field.tokens;
            let eps: Tensor<S> = gaussian_tensor(z.dims(), &mut rng);
            let u = rng.gen_range(1..=config.train_timesteps) as f64 / config.train_timesteps as f64;
            let tau = shift_time(u, config.train_shift);
            let (a, b) = (S::of(1.0 - tau), S::of(tau));
            let z_tau = z.zip_with(&eps, |zz, ee| a * zz + b * ee)?;
            let target = Arc::new(eps.sub(z)?);
            let zv = tape.constant(z_tau);
            let tr = model
                .forward_on_tape(&mut tape, &vars, zv, tau, &caps, sample.layout())
                .map_err(|e| diverged(step, e))?;
            let l = tape.mse(tr.out, target).map_err(|e| diverged(step, e))?;
            let l = tape.scale(l, inv_b).map_err(|e| diverged(step, e))?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).map_err(|e| diverged(step, e))?,
            });
        }
        let root = total.ok_or_else(|| Error::Config("empty batch".into()))?;
        let loss = tape.value(root).data()[0].f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = tape.backward(root).map_err(|e| diverged(step, e))?;
        let gs: Vec<Option<&Tensor<S>>> = vars.iter().map(|&v| grads.get(v)).collect();
        opt.step(model.params_mut(), &gs)?;
        if model.params().iter().any(|p| p.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        log.losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutput { model, log })
}

/// One shot of a sampling request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPlanEntry {
    pub frames: usize,
    pub prompt: ShotPrompt,
}

/// Frame counts and prompts of every shot, plus optional identity
/// conditioning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPlan {
    pub shots: Vec<ShotPlanEntry>,
    pub identity: Option<usize>,
}

impl ShotPlan {
    pub fn new(shots: Vec<ShotPlanEntry>) -> Result<Self> {
        if shots.is_empty() {
            return Err(Error::Config("a shot plan needs at least one shot".into()));
        }
        if let Some(s) = shots.iter().find(|s| s.frames == 0) {
            return Err(Error::Config(format!("shot with {} frames; frame counts must be >= 1", s.frames)));
        }
        Ok(Self { shots, identity: None })
    }

    /// Parses `n=<frames>,scene=<id>[,motion=<id>]` segments separated by `;`.
    /// `motion` defaults to 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut shots = Vec::new();
        for segment in text.split(';') {
            let seg = segment.trim();
            let bad = |why: &str| Error::Config(format!("malformed shot segment '{seg}': {why}"));
            if seg.is_empty() {
                return Err(bad("empty segment"));
            }
            let (mut n, mut scene, mut motion) = (None, None, None);
            for field in seg.split(',') {
                let (key, value) = field.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                let value: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| bad(&format!("'{}' is not a non-negative integer", value.trim())))?;
                let slot = match key.trim() {
                    "n" => &mut n,
                    "scene" => &mut scene,
                    "motion" => &mut motion,
                    other => return Err(bad(&format!("unknown key '{other}'"))),
                };
                if slot.replace(value).is_some() {
                    return Err(bad("repeated key"));
                }
            }
            let frames = n.ok_or_else(|| bad("missing n"))?;
            if frames == 0 {
                return Err(bad("frame counts must be >= 1"));
            }
            shots.push(ShotPlanEntry {
                frames,
                prompt: ShotPrompt {
                    scene: scene.ok_or_else(|| bad("missing scene"))?,
                    motion: motion.unwrap_or(0),
                },
            });
        }
        Self::new(shots)
    }

    pub fn with_identity(mut self, identity: Option<usize>) -> Self {
        self.identity = identity;
        self
    }

    pub fn frames(&self) -> Vec<usize> {
        self.shots.iter().map(|s| s.frames).collect()
    }

    pub fn prompts(&self) -> Vec<ShotPrompt> {
        self.shots.iter().map(|s| s.prompt).collect()
    }
}

/// Standard normal noise for one shot, from stream `shot` of `seed`.
pub fn shot_noise<S: Scalar>(seed: u64, shot: usize, rows: usize, cols: usize) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot as u64);
    gaussian_tensor(&[rows, cols], &mut rng)
}

/// Attention summaries captured during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub tau: f64,
    pub self_attn: ShotHeatmap,
    pub cross_attn: ShotHeatmap,
}

fn mean_heatmap<S: Scalar>(
    tape: &Tape<S>,
    probs: &[Var],
    qs: &[usize],
    ks: &[usize],
    shots: usize,
) -> Result<ShotHeatmap> {
    let mut acc = ShotHeatmap::zeros(shots);
    let w = 1.0 / probs.len() as f64;
    for &p in probs {
        acc.accumulate(&ShotHeatmap::from_probs(tape.value(p), qs, ks, shots)?, w)?;
    }
    Ok(acc)
}

fn conditioned_captions<S: Scalar>(world: &SyntheticWorld, plan: &ShotPlan) -> Result<CaptionBundle<S>> {
    let caps = world.encode_captions(&plan.prompts())?;
    match plan.identity {
        Some(i) => identity_captions(world, &caps, i, false),
        None => Ok(caps),
    }
}

fn check_compat<S: Scalar>(model: &Denoiser<S>, world: &SyntheticWorld) -> Result<()> {
    let (m, w) = (model.config(), world.config());
    if m.d_token != w.d_token || m.d_text != w.d_text {
        return Err(Error::Config(format!(
            "checkpoint widths ({}, {}) do not match the world ({}, {})",
            m.d_token, m.d_text, w.d_token, w.d_text
        )));
    }
    Ok(())
}

/// Euler integration from `z` at `tau = 1` down to `tau = 0`.
fn integrate<S: Scalar>(
    model: &Denoiser<S>,
    mut z: Tensor<S>,
    captions: &CaptionBundle<S>,
    layout: &ShotLayout,
    opts: &SampleOptions,
    record_tau: Option<f64>,
) -> Result<(Tensor<S>, Option<SampleTrace>)> {
    let taus = shift_timesteps(opts.steps, opts.shift)?;
    let uncond = captions.all_dropped();
    let shots = layout.shot_count();
    let token_shots = layout.token_shots();
    let record_at = record_tau.map(|r| (0..opts.steps).find(|&i| taus[i] <= r).unwrap_or(opts.steps - 1));
    let mut trace = None;
    for i in 0..opts.steps {
        let tau = taus[i];
        let mut tape = Tape::new();
        let vars = model.to_tape(&mut tape, false);
        let zv = tape.constant(z.clone());
        let tr = model.forward_on_tape(&mut tape, &vars, zv, tau, captions, layout)?;
        if record_at == Some(i) {
            trace = Some(SampleTrace {
                tau,
                self_attn: mean_heatmap(&tape, &tr.self_probs, &token_shots, &token_shots, shots)?,
                cross_attn: mean_heatmap(&tape, &tr.cross_probs, &token_shots, &tr.context_shots, shots)?,
            });
        }
        let v_cond = tape.value(tr.out).clone();
        let v = if opts.guidance == 1.0 {
            v_cond
        } else {
            let v_uncond = model.forward(&z, tau, &uncond, layout)?;
            cfg_velocity(&v_cond, &v_uncond, opts.guidance)?
        };
        let dt = S::of(taus[i + 1] - tau);
        z = z.zip_with(&v, |a, b| a + dt * b)?;
        z.ensure_finite("sampler state")
            .map_err(|_| Error::Diverged { step: i + 1, loss: f64::NAN })?;
    }
    Ok((z, trace))
}

fn noise_for<S: Scalar>(layout: &ShotLayout, d: usize, seeds: &[u64]) -> Result<Tensor<S>> {
    let parts: Vec<Tensor<S>> = (0..layout.shot_count())
        .map(|s| {
            let (a, b) = layout.token_span(s);
            shot_noise(seeds[s], s, b - a, d)
        })
        .collect();
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

pub fn sample<S: Scalar>(
    model: &Denoiser<S>,
    world: &SyntheticWorld,
    plan: &ShotPlan,
    opts: &SampleOptions,
) -> Result<TokenField<S>> {
    Ok(sample_traced(model, world, plan, opts, None)?.0)
}

/// Like [`sample`], also returning attention heatmaps from the first step at
/// or below `record_tau` (the last step when no step gets that low).
pub fn sample_traced<S: Scalar>(
    model: &Denoiser<S>,
    world: &SyntheticWorld,
    plan: &ShotPlan,
    opts: &SampleOptions,
    record_tau: Option<f64>,
) -> Result<(TokenField<S>, Option<SampleTrace>)> {
    check_compat(model, world)?;
    let layout = world.layout(plan.frames())?;
    let captions = conditioned_captions(world, plan)?;
    let seeds = vec![opts.seed; layout.shot_count()];
    let z = noise_for(&layout, world.config().d_token, &seeds)?;
    let (z, trace) = integrate(model, z, &captions, &layout, opts, record_tau)?;
    Ok((TokenField::new(layout, z)?, trace))
}

/// Unbounded-shot generation: every attempt keeps shot 0 (its noise, length
/// and caption) fixed and appends different later shots. Reference-shot
/// attention makes the generated shot 0 identical across attempts.
pub fn sample_infinite<S: Scalar>(
    model: &Denoiser<S>,
    world: &SyntheticWorld,
    reference: &ShotPlanEntry,
    identity: Option<usize>,
    attempts: &[Vec<ShotPlanEntry>],
    opts: &SampleOptions,
) -> Result<Vec<TokenField<S>>> {
    if !model.config().variant.uses_ref_attn() {
        return Err(Error::Config(format!(
            "infinite-shot sampling needs a full+refattn checkpoint, found {}",
            model.config().variant
        )));
    }
    check_compat(model, world)?;
    attempts
        .iter()
        .enumerate()
        .map(|(a, rest)| {
            let mut shots = vec![*reference];
            shots.extend_from_slice(rest);
            let plan = ShotPlan::new(shots)?.with_identity(identity);
            let layout = world.layout(plan.frames())?;
            let captions = conditioned_captions(world, &plan)?;
            let attempt_seed = opts.seed.wrapping_add(1 + a as u64);
            let seeds: Vec<u64> = (0..layout.shot_count())
                .map(|s| if s == 0 { opts.seed } else { attempt_seed })
                .collect();
            let z = noise_for(&layout, world.config().d_token, &seeds)?;
            let (z, _) = integrate(model, z, &captions, &layout, opts, None)?;
            TokenField::new(layout, z)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub identity_consistency: f64,
    pub scene_adherence: f64,
    pub cut_accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Per-sample scores; see [`score_fields`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub identity_consistency: f64,
    pub shots_correct: usize,
    pub shots: usize,
    pub cut_ok: bool,
}

pub fn score_field<S: Scalar>(world: &SyntheticWorld, field: &TokenField<S>, prompts: &[ShotPrompt]) -> Result<SampleScore> {
    let dec = world.decode(field)?;
    if dec.len() != prompts.len() {
        return shape_err("one prompt per decoded shot required");
    }
    let mut cos = Vec::new();
    for a in 0..dec.len() {
        for b in a + 1..dec.len() {
            cos.push(cosine(&dec[a].identity, &dec[b].identity));
        }
    }
    let identity_consistency = if cos.is_empty() {
        1.0
    } else {
        cos.iter().sum::<f64>() / cos.len() as f64
    };
    let shots_correct = dec.iter().zip(prompts).filter(|(d, p)| d.scene == p.scene).count();
    let constant_within = dec.iter().all(|d| d.frame_scenes.iter().all(|&f| f == d.frame_scenes[0]));
    let change_at_cuts = dec.windows(2).all(|w| w[0].frame_scenes[0] != w[1].frame_scenes[0]);
    Ok(SampleScore {
        identity_consistency,
        shots_correct,
        shots: dec.len(),
        cut_ok: constant_within && change_at_cuts,
    })
}

/// Aggregates per-sample scores in order.
pub fn aggregate(scores: &[SampleScore], seed: u64) -> Metrics {
    let n = scores.len().max(1) as f64;
    let shots: usize = scores.iter().map(|s| s.shots).sum();
    Metrics {
        identity_consistency: scores.iter().map(|s| s.identity_consistency).sum::<f64>() / n,
        scene_adherence: scores.iter().map(|s| s.shots_correct).sum::<usize>() as f64 / shots.max(1) as f64,
        cut_accuracy: scores.iter().filter(|s| s.cut_ok).count() as f64 / n,
        n_samples: scores.len(),
        seed,
    }
}

/// The evaluation prompts: `shots` shots with distinct scenes so every cut
/// is observable, lengths uniform in the configured range.
pub fn eval_plans(world: &SyntheticWorld, config: &EvalConfig) -> Vec<(ShotPlan, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_samples)
        .map(|_| {
            let (lo, hi) = config.shot_len_range;
            let frames: Vec<usize> = (0..config.shots).map(|_| rng.gen_range(lo..=hi)).collect();
            let prompts = world.random_prompts(config.shots, true, &mut rng);
            let shots = frames
                .into_iter()
                .zip(prompts)
                .map(|(frames, prompt)| ShotPlanEntry { frames, prompt })
                .collect();
            let seed = rng.gen();
            (ShotPlan { shots, identity: None }, seed)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Mean over samples of the cross-attention shot heatmap.
    pub cross_attn: ShotHeatmap,
    pub self_attn: ShotHeatmap,
}

pub fn evaluate<S: Scalar>(
    model: &Denoiser<S>,
    world: &SyntheticWorld,
    config: &EvalConfig,
    opts: &SampleOptions,
) -> Result<EvalReport> {
    let plans = eval_plans(world, config);
    let results = parallel_map(plans, |(plan, seed)| -> Result<(SampleScore, SampleTrace)> {
        let o = SampleOptions { seed, ..*opts };
        let (field, trace) = sample_traced(model, world, &plan, &o, Some(config.heatmap_tau))?;
        let trace = trace.ok_or_else(|| Error::Numeric("no sampling step reached the heatmap timestep".into()))?;
        Ok((score_field(world, &field, &plan.prompts())?, trace))
    });
    let mut scores = Vec::new();
    let mut cross = ShotHeatmap::zeros(config.shots);
    let mut selfh = ShotHeatmap::zeros(config.shots);
    let w = 1.0 / config.n_samples.max(1) as f64;
    for r in results {
        let (s, t) = r?;
        scores.push(s);
        cross.accumulate(&t.cross_attn, w)?;
        selfh.accumulate(&t.self_attn, w)?;
    }
    Ok(EvalReport {
        metrics: aggregate(&scores, config.seed),
        cross_attn: cross,
        self_attn: selfh,
    })
}

/// Path of the JSON sidecar next to a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Writes the tensor file and its JSON sidecar.
pub fn save_model<S: Scalar>(path: &Path, model: &Denoiser<S>, run: &RunConfig) -> Result<()> {
    if &run.model != model.config() {
        return Err(Error::Config("run config does not describe this model".into()));
    }
    let records: Vec<(&str, &Tensor<S>)> = model
        .names()
        .iter()
        .map(|n| n.as_str())
        .zip(model.params())
        .collect();
    save_records(path, &records)?;
    std::fs::write(sidecar_path(path), run.to_json())?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<(Denoiser<S>, RunConfig)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::Config(format!("cannot read checkpoint sidecar {}: {e}", side.display())))?;
    let run = RunConfig::from_json(&text)?;
    let named = load_records(path)?;
    let model = Denoiser::from_params(run.model.clone(), named)?;
    Ok((model, run))
}

/// One row of a variant comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Shot offsets in effect: zero where the variant disables a mechanism.
    pub shot_rope: ShotRopeParams,
    pub is_default: bool,
    pub metrics: Metrics,
    pub final_loss: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,j,k,default,identity_consistency,scene_adherence,cut_accuracy,final_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.shot_rope.j,
            r.shot_rope.k,
            r.is_default,
            r.metrics.identity_consistency,
            r.metrics.scene_adherence,
            r.metrics.cut_accuracy,
            r.final_loss
        );
    }
    s
}

/// Trains and evaluates one model per `(variant, j, k)` entry. Every entry
/// shares the run's seeds, so differences come from the rotary settings.
pub fn ablate<S: Scalar>(run: &RunConfig, entries: &[(Variant, ShotRopeParams)]) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let world = SyntheticWorld::new(run.world.clone())?;
    let results = parallel_map(entries.to_vec(), |(variant, params)| -> Result<AblationRow> {
        let mut mc = run.model.clone();
        mc.variant = variant;
        mc.shot_rope = params;
        let model = init_model::<S>(&mc, run.train.init_seed)?;
        let out = train(model, &world, &run.train, |_, _| {})?;
        let report = evaluate(&out.model, &world, &run.eval, &run.sample)?;
        Ok(AblationRow {
            variant,
            shot_rope: ShotRopeParams {
                j: mc.effective_j(),
                k: mc.effective_k(),
            },
            is_default: variant == Variant::Full && params == ShotRopeParams::default(),
            metrics: report.metrics,
            final_loss: out.log.smoothed(out.log.losses.len()),
        })
    });
    results.into_iter().collect()
}

/// The `{2,4,6} × {2,6,12}` grid of full-model settings.
pub fn jk_grid() -> Vec<(Variant, ShotRopeParams)> {
    let mut out = Vec::new();
    for j in [2.0, 4.0, 6.0] {
        for k in [2.0, 6.0, 12.0] {
            out.push((Variant::Full, ShotRopeParams { j, k }));
        }
    }
    out
}

/// Rectified-flow loss of a fixed example as a function of one parameter
/// tensor, for finite-difference checks. The model and data are held in
/// 64-bit and cast to the evaluation precision.
pub struct ParamLoss {
    pub model: Denoiser<f64>,
    pub param: usize,
    pub z_tau: Tensor<f64>,
    pub target: Tensor<f64>,
    pub tau: f64,
    pub captions: CaptionBundle<f64>,
    pub layout: ShotLayout,
}

fn cast_captions<T: Scalar>(c: &CaptionBundle<f64>) -> CaptionBundle<T> {
    let entries = c
        .entries()
        .iter()
        .map(|e| crate::caption::CaptionEntry {
            shot: e.shot,
            tokens: e.tokens.cast(),
            dropped: e.dropped,
        })
        .collect();
    CaptionBundle::new(entries).expect("valid bundle")
}

impl ScalarFn for ParamLoss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let m: Denoiser<T> = self.model.cast();
        let vars: Vec<Var> = m
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| if i == self.param { x } else { tape.constant(p.clone()) })
            .collect();
        let z = tape.constant(self.z_tau.cast());
        let tr = m.forward_on_tape(tape, &vars, z, self.tau, &cast_captions(&self.captions), &self.layout)?;
        tape.mse(tr.out, Arc::new(self.target.cast()))
    }
}
