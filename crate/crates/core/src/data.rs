//! A synthetic multi-shot world with exact decoding.
//!
//! Every visual token is a fixed linear render of four factors: the sample's
//! identity vector, the shot's scene embedding, the shot's motion embedding,
//! and six positional features. Because the render map has orthogonal columns,
//! its pseudo-inverse recovers the factors from any token, which gives
//! oracle metrics for identity consistency and prompt adherence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::caption::{CaptionBundle, CaptionEntry};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::shot_rope::ShotLayout;
use crate::tensor::Tensor;

pub const D_POS: usize = 6;
const OMEGA_T: f64 = 0.7;
const OMEGA_S: f64 = 1.3;
const CAPTION_TOKENS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub d_id: usize,
    pub n_id: usize,
    pub v_scene: usize,
    pub v_mot: usize,
    pub d_scene: usize,
    pub d_mot: usize,
    pub d_token: usize,
    pub d_text: usize,
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
    /// Norm of the identity factor inside each token.
    pub id_gain: f64,
    /// Amplitude of the within-caption position code added to caption tokens.
    pub caption_pos_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_id: 16,
            n_id: 256,
            v_scene: 8,
            v_mot: 4,
            d_scene: 16,
            d_mot: 8,
            d_token: 128,
            d_text: 64,
            sigma: 0.05,
            height: 4,
            width: 4,
            id_gain: 12.0,
            caption_pos_scale: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn factor_dim(&self) -> usize {
        self.d_id + self.d_scene + self.d_mot + D_POS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_id == 0 || self.n_id == 0 || self.v_scene == 0 || self.v_mot == 0 || self.d_text == 0 {
            return bad("world sizes must be positive".into());
        }
        if self.v_scene > self.d_scene {
            return bad(format!("v_scene {} exceeds d_scene {}", self.v_scene, self.d_scene));
        }
        if self.v_mot > self.d_mot {
            return bad(format!("v_mot {} exceeds d_mot {}", self.v_mot, self.d_mot));
        }
        if self.d_token < self.factor_dim() {
            return bad(format!(
                "d_token {} is below the factor dimension {}",
                self.d_token,
                self.factor_dim()
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("frame grid must be non-empty".into());
        }
        if !(self.sigma >= 0.0) || !(self.id_gain > 0.0) || !self.caption_pos_scale.is_finite() {
            return bad("sigma must be >= 0 and id_gain > 0".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `count` orthonormal vectors of length `dim` (rows), by Gram-Schmidt on
/// Gaussian draws.
fn orthonormal_rows(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out
}

/// In-place Cholesky of a symmetric positive definite `n × n` matrix.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12) {
            return Err(Error::Numeric("render map is rank deficient".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Least-squares left inverse `(Mᵀ M)⁻¹ Mᵀ` of a `rows × cols` matrix.
fn pseudo_inverse(m: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut gram = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            gram[i * cols + j] = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
        }
    }
    cholesky(&mut gram, cols)?;
    let mut out = vec![0.0; cols * rows];
    for r in 0..rows {
        // Solve L Lᵀ x = M[r, :]ᵀ, giving column r of the inverse.
        let mut y: Vec<f64> = (0..cols).map(|c| m[r * cols + c]).collect();
        for i in 0..cols {
            let mut s = y[i];
            for k in 0..i {
                s -= gram[i * cols + k] * y[k];
            }
            y[i] = s / gram[i * cols + i];
        }
        for i in (0..cols).rev() {
            let mut s = y[i];
            for k in i + 1..cols {
                s -= gram[k * cols + i] * y[k];
            }
            y[i] = s / gram[i * cols + i];
        }
        for c in 0..cols {
            out[c * rows + r] = y[c];
        }
    }
    Ok(out)
}

/// Sinusoidal code of a caption token's index inside its shot's caption.
fn caption_position_code(index: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 10000f64.powf(-2.0 * (i / 2) as f64 / dim as f64);
            let a = index as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

pub fn fourier(t_local: usize, h: usize, w: usize) -> [f64; D_POS] {
    let (t, h, w) = (t_local as f64, h as f64, w as f64);
    [
        (OMEGA_T * t).sin(),
        (OMEGA_T * t).cos(),
        (OMEGA_S * h).sin(),
        (OMEGA_S * h).cos(),
        (OMEGA_S * w).sin(),
        (OMEGA_S * w).cos(),
    ]
}

/// Visual tokens of one multi-shot sample, rows in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenField<S> {
    pub layout: ShotLayout,
    pub tokens: Tensor<S>,
}

impl<S: Scalar> TokenField<S> {
    pub fn new(layout: ShotLayout, tokens: Tensor<S>) -> Result<Self> {
        if tokens.dims().len() != 2 || tokens.rows() != layout.token_count() {
            return shape_err(format!(
                "token field of shape {:?} for a layout of {} tokens",
                tokens.dims(),
                layout.token_count()
            ));
        }
        Ok(Self { layout, tokens })
    }

    /// Tokens of shot `s` only.
    pub fn shot_tokens(&self, s: usize) -> Tensor<S> {
        let (a, b) = self.layout.token_span(s);
        self.tokens.slice_rows(a, b).expect("span inside field")
    }
}

/// Caption content of one shot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPrompt {
    pub scene: usize,
    pub motion: usize,
}

/// Factor estimates of one shot, averaged over its tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotDecode {
    pub identity: Vec<f64>,
    pub scene: usize,
    pub motion: usize,
    /// Scene decoded from each frame separately.
    pub frame_scenes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    config: WorldConfig,
    identities: Vec<Vec<f64>>,
    scene_emb: Vec<Vec<f64>>,
    motion_emb: Vec<Vec<f64>>,
    /// `d_token × F`, row major.
    render: Vec<f64>,
    /// `F × d_token`, row major.
    inverse: Vec<f64>,
    scene_text: Vec<Vec<f64>>,
    motion_text: Vec<Vec<f64>>,
    /// `d_text × d_id` projection giving a caption-space identity token.
    id_text: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let identities = (0..config.n_id)
            .map(|_| {
                let mut v: Vec<f64> = (0..config.d_id).map(|_| gaussian(&mut rng)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter_mut().for_each(|a| *a /= n);
                v
            })
            .collect();
        // Orthogonal, equal-norm vocabularies: nearest-embedding decoding has
        // no preferred class under isotropic noise.
        let scale_rows = |rows: Vec<Vec<f64>>, s: f64| -> Vec<Vec<f64>> {
            rows.into_iter().map(|r| r.into_iter().map(|a| a * s).collect()).collect()
        };
        let scene_emb = scale_rows(
            orthonormal_rows(config.v_scene, config.d_scene, &mut rng),
            (config.d_scene as f64).sqrt(),
        );
        let motion_emb = scale_rows(
            orthonormal_rows(config.v_mot, config.d_mot, &mut rng),
            (config.d_mot as f64).sqrt(),
        );
        let f = config.factor_dim();
        let cols = orthonormal_rows(f, config.d_token, &mut rng);
        let c = (config.d_token as f64 / f as f64).sqrt();
        let mut render = vec![0.0; config.d_token * f];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                render[i * f + j] = v * c;
            }
        }
        let inverse = pseudo_inverse(&render, config.d_token, f)?;
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..config.d_text).map(|_| gaussian(&mut rng)).collect())
                .collect()
        };
        let scene_text = table(config.v_scene);
        let motion_text = table(config.v_mot);
        let id_text = (0..config.d_text * config.d_id).map(|_| gaussian(&mut rng)).collect();
        Ok(Self {
            config,
            identities,
            scene_emb,
            motion_emb,
            render,
            inverse,
            scene_text,
            motion_text,
            id_text,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn identity(&self, index: usize) -> Result<&[f64]> {
        self.identities
            .get(index)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Index(format!("identity {index} outside pool of {}", self.config.n_id)))
    }

    pub fn identities(&self) -> &[Vec<f64>] {
        &self.identities
    }

    pub fn layout(&self, frames: Vec<usize>) -> Result<ShotLayout> {
        ShotLayout::new(frames, self.config.height, self.config.width)
    }

    fn check_prompt(&self, p: &ShotPrompt) -> Result<()> {
        if p.scene >= self.config.v_scene {
            return Err(Error::Index(format!("scene {} outside vocabulary of {}", p.scene, self.config.v_scene)));
        }
        if p.motion >= self.config.v_mot {
            return Err(Error::Index(format!(
                "motion {} outside vocabulary of {}",
                p.motion, self.config.v_mot
            )));
        }
        Ok(())
    }

    /// Clean factors of one token.
    fn factors(&self, id: &[f64], prompt: &ShotPrompt, t: usize, h: usize, w: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.config.factor_dim());
        f.extend(id.iter().map(|a| a * self.config.id_gain));
        f.extend_from_slice(&self.scene_emb[prompt.scene]);
        f.extend_from_slice(&self.motion_emb[prompt.motion]);
        f.extend_from_slice(&fourier(t, h, w));
        f
    }

    /// `token(s, t, h, w) = M [id, scene_s, motion_s, fourier(t, h, w)] + sigma noise`.
    pub fn render_sample<S: Scalar>(
        &self,
        id_index: usize,
        prompts: &[ShotPrompt],
        layout: &ShotLayout,
        noise_seed: u64,
    ) -> Result<TokenField<S>> {
        self.render_with_sigma(id_index, prompts, layout, noise_seed, self.config.sigma)
    }

    pub fn render_with_sigma<S: Scalar>(
        &self,
        id_index: usize,
        prompts: &[ShotPrompt],
        layout: &ShotLayout,
        noise_seed: u64,
        sigma: f64,
    ) -> Result<TokenField<S>> {
        if prompts.len() != layout.shot_count() {
            return shape_err(format!("{} prompts for {} shots", prompts.len(), layout.shot_count()));
        }
        if layout.height() != self.config.height || layout.width() != self.config.width {
            return shape_err("layout frame grid differs from the world's");
        }
        prompts.iter().try_for_each(|p| self.check_prompt(p))?;
        let id = self.identity(id_index)?.to_vec();
        let d = self.config.d_token;
        let f = self.config.factor_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut data = Vec::with_capacity(layout.token_count() * d);
        for pos in layout.positions() {
            let fac = self.factors(&id, &prompts[pos.shot], pos.t_local, pos.h, pos.w);
            for r in 0..d {
                let clean: f64 = (0..f).map(|c| self.render[r * f + c] * fac[c]).sum();
                let noise = if sigma > 0.0 { sigma * gaussian(&mut rng) } else { 0.0 };
                data.push(S::of(clean + noise));
            }
        }
        TokenField::new(layout.clone(), Tensor::new(vec![layout.token_count(), d], data)?)
    }

    /// Factor estimate `M⁺ token` of every row.
    pub fn decode_factors<S: Scalar>(&self, tokens: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
        let d = self.config.d_token;
        if tokens.cols() != d {
            return shape_err(format!("tokens have {} features, world renders {d}", tokens.cols()));
        }
        let f = self.config.factor_dim();
        Ok((0..tokens.rows())
            .map(|i| {
                let row = tokens.row(i);
                (0..f)
                    .map(|c| (0..d).map(|r| self.inverse[c * d + r] * row[r].f64()).sum())
                    .collect()
            })
            .collect())
    }

    fn nearest(table: &[Vec<f64>], v: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, e) in table.iter().enumerate() {
            let dist: f64 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1
    }

    fn mean_rows(rows: &[Vec<f64>], start: usize, len: usize) -> Vec<f64> {
        let n = rows.len() as f64;
        let mut out = vec![0.0; len];
        for r in rows {
            for (o, v) in out.iter_mut().zip(&r[start..start + len]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Per-shot identity, scene, motion and per-frame scene estimates.
    pub fn decode<S: Scalar>(&self, field: &TokenField<S>) -> Result<Vec<ShotDecode>> {
        let factors = self.decode_factors(&field.tokens)?;
        let c = &self.config;
        let (s_off, m_off) = (c.d_id, c.d_id + c.d_scene);
        let per_frame = field.layout.tokens_per_frame();
        (0..field.layout.shot_count())
            .map(|s| {
                let (a, b) = field.layout.token_span(s);
                let shot = &factors[a..b];
                let identity = Self::mean_rows(shot, 0, c.d_id)
                    .into_iter()
                    .map(|v| v / c.id_gain)
                    .collect();
                let scene = Self::nearest(&self.scene_emb, &Self::mean_rows(shot, s_off, c.d_scene));
                let motion = Self::nearest(&self.motion_emb, &Self::mean_rows(shot, m_off, c.d_mot));
                let frame_scenes = shot
                    .chunks(per_frame)
                    .map(|fr| Self::nearest(&self.scene_emb, &Self::mean_rows(fr, s_off, c.d_scene)))
                    .collect();
                Ok(ShotDecode {
                    identity,
                    scene,
                    motion,
                    frame_scenes,
                })
            })
            .collect()
    }

    pub fn decode_identity<S: Scalar>(&self, field: &TokenField<S>) -> Result<Vec<Vec<f64>>> {
        Ok(self.decode(field)?.into_iter().map(|d| d.identity).collect())
    }

    pub fn decode_scene<S: Scalar>(&self, field: &TokenField<S>) -> Result<Vec<usize>> {
        Ok(self.decode(field)?.into_iter().map(|d| d.scene).collect())
    }

    /// Pool member with the highest cosine to `v`.
    pub fn closest_identity(&self, v: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, id) in self.identities.iter().enumerate() {
            let c = cosine(id, v);
            if c > best.0 {
                best = (c, i);
            }
        }
        best.1
    }

    /// Per-shot caption sequences: a scene token and a motion token, each
    /// with a within-caption position code.
    pub fn encode_captions<S: Scalar>(&self, prompts: &[ShotPrompt]) -> Result<CaptionBundle<S>> {
        prompts.iter().try_for_each(|p| self.check_prompt(p))?;
        let d = self.config.d_text;
        let codes: Vec<Vec<f64>> = (0..CAPTION_TOKENS).map(|j| caption_position_code(j, d)).collect();
        let entries = prompts
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let rows = [&self.scene_text[p.scene], &self.motion_text[p.motion]];
                let data = rows
                    .iter()
                    .zip(&codes)
                    .flat_map(|(r, code)| {
                        r.iter()
                            .zip(code)
                            .map(|(a, b)| S::of(a + self.config.caption_pos_scale * b))
                    })
                    .collect();
                Ok(CaptionEntry {
                    shot: s,
                    tokens: Tensor::new(vec![CAPTION_TOKENS, d], data)?,
                    dropped: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CaptionBundle::new(entries)
    }

    /// Caption-space token for pool identity `index`.
    pub fn identity_embedding<S: Scalar>(&self, index: usize) -> Result<Vec<S>> {
        let id = self.identity(index)?;
        let k = self.config.d_id;
        Ok((0..self.config.d_text)
            .map(|r| S::of((0..k).map(|c| self.id_text[r * k + c] * id[c]).sum()))
            .collect())
    }

    /// Random prompts for `shots` shots; scenes distinct when `distinct_scenes`.
    pub fn random_prompts<R: Rng>(&self, shots: usize, distinct_scenes: bool, rng: &mut R) -> Vec<ShotPrompt> {
        let scenes: Vec<usize> = if distinct_scenes && shots <= self.config.v_scene {
            let mut all: Vec<usize> = (0..self.config.v_scene).collect();
            all.shuffle(rng);
            all.truncate(shots);
            all
        } else {
            (0..shots).map(|_| rng.gen_range(0..self.config.v_scene)).collect()
        };
        scenes
            .into_iter()
            .map(|scene| ShotPrompt {
                scene,
                motion: rng.gen_range(0..self.config.v_mot),
            })
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample<S> {
    pub field: TokenField<S>,
    pub captions: CaptionBundle<S>,
    pub id_index: usize,
    pub prompts: Vec<ShotPrompt>,
}

impl<S> Sample<S> {
    pub fn layout(&self) -> &ShotLayout {
        &self.field.layout
    }
}

/// Shot-count draw: with a lower bound of 1 and room above it, a single shot
/// has probability 1/3 and the multi-shot counts share the rest uniformly.
pub fn draw_shot_count<R: Rng>(range: (usize, usize), rng: &mut R) -> usize {
    let (lo, hi) = range;
    if lo == hi {
        return lo;
    }
    if lo == 1 {
        if rng.gen_range(0..3) == 0 {
            1
        } else {
            rng.gen_range(2..=hi)
        }
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn make_batch_with_rng<S: Scalar, R: Rng>(
    world: &SyntheticWorld,
    batch_size: usize,
    shot_count_range: (usize, usize),
    shot_len_range: (usize, usize),
    rng: &mut R,
) -> Result<Vec<Sample<S>>> {
    let (slo, shi) = shot_count_range;
    let (llo, lhi) = shot_len_range;
    if slo == 0 || slo > shi || llo == 0 || llo > lhi {
        return Err(Error::Config(format!(
            "bad ranges: shots {slo}..={shi}, lengths {llo}..={lhi}"
        )));
    }
    (0..batch_size)
        .map(|_| {
            let shots = draw_shot_count(shot_count_range, rng);
            let frames: Vec<usize> = (0..shots).map(|_| rng.gen_range(llo..=lhi)).collect();
            let prompts = world.random_prompts(shots, false, rng);
            let id_index = rng.gen_range(0..world.config.n_id);
            let noise_seed: u64 = rng.gen();
            let layout = world.layout(frames)?;
            let field = world.render_sample(id_index, &prompts, &layout, noise_seed)?;
            let captions = world.encode_captions(&prompts)?;
            Ok(Sample {
                field,
                captions,
                id_index,
                prompts,
            })
        })
        .collect()
}

pub fn make_batch<S: Scalar>(
    world: &SyntheticWorld,
    batch_size: usize,
    shot_count_range: (usize, usize),
    shot_len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Sample<S>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch_with_rng(world, batch_size, shot_count_range, shot_len_range, &mut rng)
}
