//! Built-in property suites, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ref_attention, scaled_dot_attention};
use crate::autograd::grad_check;
use crate::caption::{CaptionBundle, CaptionEntry};
use crate::checkpoint::{read_records, write_records};
use crate::data::{SyntheticWorld, WorldConfig};
use crate::engine::{init_model, sample, shift_timesteps, train, ParamLoss, SampleOptions, ShotPlan, TrainConfig};
use crate::error::Result;
use crate::model::{Denoiser, DenoiserConfig, Variant};
use crate::rope::{rope_1d, RotaryBasis, DEFAULT_BASE};
use crate::shot_rope::{tarope, ShotLayout, ShotRopeParams};
use crate::suppression::logit_bound_check;
use crate::tensor::Tensor;

/// Deliberate faults for checking that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sabotage {
    /// Rotate the second operand of every rotary identity by the negated
    /// position.
    RopeSign,
}

impl std::str::FromStr for Sabotage {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rope-sign" => Ok(Sabotage::RopeSign),
            other => Err(crate::Error::Config(format!("unknown sabotage mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32).collect()
}

fn suite_rope(sabotage: Option<Sabotage>) -> Result<SuiteResult> {
    let basis = RotaryBasis::<f32>::new(64, DEFAULT_BASE)?;
    let second = |p: f64| if sabotage == Some(Sabotage::RopeSign) { -p } else { p };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_norm, mut worst_rel, mut worst_comp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let q = randn(64, &mut rng);
        let k = randn(64, &mut rng);
        let m = rng.gen_range(-512i32..=512) as f64;
        let n = rng.gen_range(-512i32..=512) as f64;
        let rq = rope_1d(&q, m, &basis)?;
        worst_norm = worst_norm.max((norm(&rq) - norm(&q)).abs() / norm(&q));
        let lhs = dot(&rq, &rope_1d(&k, second(n), &basis)?);
        let rhs = dot(&rope_1d(&q, m - n, &basis)?, &k);
        worst_rel = worst_rel.max((lhs - rhs).abs() / (norm(&q) * norm(&k)));
        let (a, b) = (m / 2.0, n / 2.0);
        let twice = rope_1d(&rope_1d(&q, a, &basis)?, second(b), &basis)?;
        let once = rope_1d(&q, a + b, &basis)?;
        let diff = twice.iter().zip(&once).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
        worst_comp = worst_comp.max(diff / norm(&q));
    }
    Ok(SuiteResult {
        name: "rope identities",
        passed: worst_norm <= 1e-6 && worst_rel <= 1e-5 && worst_comp <= 1e-5,
        detail: format!("norm {worst_norm:.2e}, relative {worst_rel:.2e}, composition {worst_comp:.2e}"),
    })
}

fn suite_matched_pair() -> Result<SuiteResult> {
    let basis = RotaryBasis::<f64>::new(64, DEFAULT_BASE)?;
    let p = ShotRopeParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..64).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let k: Vec<f64> = (0..64).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let s = rng.gen_range(0..8);
        let a = tarope(&q, s, &p, &basis)?;
        let b = tarope(&k, s, &p, &basis)?;
        let rotated: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let plain: f64 = q.iter().zip(&k).map(|(x, y)| x * y).sum();
        worst = worst.max((rotated - plain).abs());
    }
    Ok(SuiteResult {
        name: "matched-shot logits",
        passed: worst <= 1e-6,
        detail: format!("max |difference| {worst:.2e}"),
    })
}

fn suite_bound() -> Result<SuiteResult> {
    let p = ShotRopeParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = f64::INFINITY;
    for d in [16usize, 64, 128] {
        let basis = RotaryBasis::<f64>::new(d, DEFAULT_BASE)?;
        for _ in 0..1000 {
            let mut q: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let mut k: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            for v in [&mut q, &mut k] {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
            }
            let (s1, s2) = (rng.gen_range(0..5), rng.gen_range(0..5));
            worst = worst.min(logit_bound_check(&q, &k, s1, s2, &p, &basis)?);
        }
    }
    Ok(SuiteResult {
        name: "suppression bound",
        passed: worst >= -1e-6,
        detail: format!("min margin {worst:.3e}"),
    })
}

fn suite_ref_attn() -> Result<SuiteResult> {
    let layout = ShotLayout::new(vec![2, 3, 2], 2, 2)?;
    let n = layout.token_count();
    let (_, end0) = layout.token_span(0);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mk = |rng: &mut ChaCha8Rng| Tensor::new(vec![n, 16], randn(n * 16, rng));
    let (q, k, v) = (mk(&mut rng)?, mk(&mut rng)?, mk(&mut rng)?);
    let base = ref_attention(&q, &k, &v, &layout)?;
    let solo = scaled_dot_attention(&q.slice_rows(0, end0)?, &k.slice_rows(0, end0)?, &v.slice_rows(0, end0)?)?;
    let mut ok = base.slice_rows(0, end0)? == solo;
    for trial in 0..20 {
        let mut t = [q.clone(), k.clone(), v.clone()];
        for x in t[trial % 3].data_mut()[end0 * 16..].iter_mut() {
            *x = rng.gen_range(-5.0..5.0);
        }
        let out = ref_attention(&t[0], &t[1], &t[2], &layout)?;
        ok &= out.slice_rows(0, end0)? == base.slice_rows(0, end0)?;
    }
    Ok(SuiteResult {
        name: "reference-shot isolation",
        passed: ok,
        detail: "shot 0 rows compared bitwise over 20 perturbations".into(),
    })
}

fn tiny_config(variant: Variant) -> DenoiserConfig {
    DenoiserConfig {
        d_token: 12,
        d_text: 8,
        d_model: 24,
        blocks: 1,
        heads: 2,
        variant,
        ..DenoiserConfig::default()
    }
}

fn tiny_loss(param: usize) -> Result<ParamLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model: Denoiser<f64> = Denoiser::init(tiny_config(Variant::Full), &mut rng)?;
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.4..0.4));
    }
    let layout = ShotLayout::new(vec![2, 1], 1, 2)?;
    let n = layout.token_count();
    let captions = CaptionBundle::new(
        (0..2)
            .map(|s| CaptionEntry {
                shot: s,
                tokens: Tensor::from_fn(&[2, 8], |_| rng.gen_range(-1.0..1.0)),
                dropped: s == 1,
            })
            .collect(),
    )?;
    Ok(ParamLoss {
        model,
        param,
        z_tau: Tensor::from_fn(&[n, 12], |_| rng.gen_range(-1.0..1.0)),
        target: Tensor::from_fn(&[n, 12], |_| rng.gen_range(-1.0..1.0)),
        tau: 0.6,
        captions,
        layout,
    })
}

/// Largest relative gradient error over a selection of parameter tensors,
/// with the analytic gradient at 32-bit and 64-bit precision.
pub fn model_grad_errors() -> Result<(f64, f64)> {
    let probe = tiny_loss(0)?;
    let names = probe.model.names().to_vec();
    let pick = [
        "embed.w",
        "time.b",
        "blocks.0.self.wq",
        "blocks.0.self.bv",
        "blocks.0.cross.wk",
        "blocks.0.cross.wo",
        "blocks.0.ffn.w1",
        "head.w",
        "null_caption",
    ];
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for name in pick {
        let idx = names.iter().position(|n| n == name).expect("known parameter");
        let f = tiny_loss(idx)?;
        let x = f.model.params()[idx].clone();
        e32 = e32.max(grad_check::<f32, _>(&f, &x.cast(), 1e-5)?);
        e64 = e64.max(grad_check::<f64, _>(&f, &x, 1e-5)?);
    }
    Ok((e32, e64))
}

fn suite_grad() -> Result<SuiteResult> {
    let (e32, e64) = model_grad_errors()?;
    Ok(SuiteResult {
        name: "gradient check",
        passed: e32 <= 1e-3 && e64 <= 1e-4,
        detail: format!("max relative error: 32-bit {e32:.2e}, 64-bit {e64:.2e}"),
    })
}

fn suite_determinism() -> Result<SuiteResult> {
    let world = SyntheticWorld::new(WorldConfig {
        d_token: 48,
        d_text: 8,
        height: 1,
        width: 2,
        ..WorldConfig::default()
    })?;
    let mc = DenoiserConfig {
        d_token: 48,
        ..tiny_config(Variant::Full)
    };
    let tc = TrainConfig {
        steps: 3,
        ..TrainConfig::default()
    };
    let run = || -> Result<_> {
        let m = init_model::<f32>(&mc, 5)?;
        let out = train(m, &world, &tc, |_, _| {})?;
        let plan = ShotPlan::parse("n=2,scene=1,motion=0;n=1,scene=4,motion=2")?;
        let opts = SampleOptions {
            steps: 4,
            seed: 9,
            ..SampleOptions::default()
        };
        let s = sample(&out.model, &world, &plan, &opts)?;
        Ok((out.log.losses, out.model.params().to_vec(), s.tokens))
    };
    let (a, b) = (run()?, run()?);
    Ok(SuiteResult {
        name: "determinism",
        passed: a == b,
        detail: "two identical train and sample runs compared bitwise".into(),
    })
}

fn suite_checkpoint() -> Result<SuiteResult> {
    let model = init_model::<f32>(&tiny_config(Variant::TcRope), 3)?;
    let recs: Vec<(&str, &Tensor<f32>)> = model.names().iter().map(|s| s.as_str()).zip(model.params()).collect();
    let mut buf = Vec::new();
    write_records(&mut buf, &recs)?;
    let back = Denoiser::from_params(model.config().clone(), read_records(&mut buf.as_slice())?)?;
    Ok(SuiteResult {
        name: "checkpoint round trip",
        passed: back == model && &buf[..4] == b"ECSH",
        detail: format!("{} tensors, {} bytes", recs.len(), buf.len()),
    })
}

fn suite_schedule() -> Result<SuiteResult> {
    let mut ok = true;
    for shift in [1.0, 2.0, 5.0, 9.0] {
        for n in [1, 2, 50] {
            let t = shift_timesteps(n, shift)?;
            ok &= t[0] == 1.0 && t[n] == 0.0 && t.windows(2).all(|w| w[1] < w[0]);
        }
    }
    let mid = shift_timesteps(2, 5.0)?[1];
    ok &= (mid - 2.5 / 3.0).abs() < 1e-12;
    Ok(SuiteResult {
        name: "timestep schedule",
        passed: ok,
        detail: format!("shift 5 midpoint {mid:.6}"),
    })
}

/// Runs every suite; a suite that errors counts as failed.
pub fn run_selftest(sabotage: Option<Sabotage>) -> Vec<SuiteResult> {
    let suites: Vec<(&'static str, Box<dyn Fn() -> Result<SuiteResult>>)> = vec![
        ("rope identities", Box::new(move || suite_rope(sabotage))),
        ("matched-shot logits", Box::new(suite_matched_pair)),
        ("suppression bound", Box::new(suite_bound)),
        ("reference-shot isolation", Box::new(suite_ref_attn)),
        ("gradient check", Box::new(suite_grad)),
        ("determinism", Box::new(suite_determinism)),
        ("checkpoint round trip", Box::new(suite_checkpoint)),
        ("timestep schedule", Box::new(suite_schedule)),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| SuiteResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_and_sabotage_is_caught() {
        let r = run_selftest(None);
        assert!(r.len() >= 6);
        for s in &r {
            assert!(s.passed, "{}: {}", s.name, s.detail);
        }
        let bad = suite_rope(Some(Sabotage::RopeSign)).unwrap();
        assert!(!bad.passed);
    }
}
