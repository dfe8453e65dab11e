//! `shotrope` command-line tool.
//!
//! Exit codes: 0 success, 1 failed self-test, 2 usage or configuration
//! error, 3 numeric divergence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shotrope::checkpoint::save_records;
use shotrope::data::SyntheticWorld;
use shotrope::engine::{
    ablate, ablation_csv, aggregate, init_model, jk_grid, load_model, sample, sample_infinite, save_model,
    score_field, train, RunConfig, SampleOptions, ShotPlan,
};
use shotrope::model::Variant;
use shotrope::selftest::{run_selftest, Sabotage};
use shotrope::suppression::{delta_curve, uniform_grid};

#[derive(Parser)]
#[command(name = "shotrope", version, about = "Shot-aware rotary attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on the synthetic multi-shot world.
    Train(TrainArgs),
    /// Generate a multi-shot sample from a checkpoint and score it.
    Sample(SampleArgs),
    /// Export the normalized suppression curve delta(x) = f(x) / f(0).
    Curve(CurveArgs),
    /// Train and compare rotary variants.
    Ablate(AblateArgs),
    /// Run the built-in property suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// vanilla, tcrope, full or full+refattn.
    #[arg(long)]
    variant: Option<Variant>,
    /// Seed for initialization; the data stream uses seed + 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Shot list such as `n=4,scene=3,motion=1;n=6,scene=7,motion=0`.
    /// With --ref-attn, repeat once per attempt; every group starts with the
    /// same reference shot.
    #[arg(long, required = true)]
    shots: Vec<String>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 5.0)]
    shift: f64,
    #[arg(long, default_value_t = 5.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Infinite-shot mode; needs a full+refattn checkpoint.
    #[arg(long)]
    ref_attn: bool,
    /// Condition every shot on this identity.
    #[arg(long)]
    id: Option<usize>,
    /// Output directory for tokens and metrics.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    k: f64,
    #[arg(long, default_value_t = 50.0)]
    xmax: f64,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Run configuration (JSON). The reduced comparison setup applies when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also sweep j in {2,4,6} and k in {2,6,12} for the full model.
    #[arg(long)]
    grid: bool,
    /// Override the number of optimizer steps per model.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, hide = true)]
    sabotage: Option<Sabotage>,
}

enum Failure {
    Usage(String),
    Core(shotrope::Error),
    Tests(usize),
}

impl From<shotrope::Error> for Failure {
    fn from(e: shotrope::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Tests(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(shotrope::Error::Diverged { .. } | shotrope::Error::Numeric(_)) => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Tests(n) => write!(f, "{n} suite(s) failed"),
        }
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig, Failure> {
    match path {
        Some(p) if !p.is_file() => Err(Failure::Usage(format!("config file not found: {}", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(fallback),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut run = load_config(a.config.as_deref(), RunConfig::default())?;
    if let Some(v) = a.variant {
        run.model.variant = v;
    }
    if let Some(seed) = a.seed {
        run.train.init_seed = seed;
        run.train.data_seed = seed.wrapping_add(1);
    }
    if let Some(steps) = a.steps {
        run.train.steps = steps;
    }
    run.validate()?;
    create_dir(&a.out)?;
    let world = SyntheticWorld::new(run.world.clone())?;
    let model = init_model::<f32>(&run.model, run.train.init_seed)?;
    eprintln!(
        "training {} ({} parameters) for {} steps",
        run.model.variant,
        model.param_count(),
        run.train.steps
    );
    let total = run.train.steps;
    let out = train(model, &world, &run.train, |step, loss| {
        if step % 100 == 0 || step == total {
            eprintln!("step {step:>6}  loss {loss:.5}");
        }
    })?;
    let ckpt = a.out.join("model.ecsh");
    save_model(&ckpt, &out.model, &run)?;
    std::fs::write(a.out.join("loss.csv"), out.log.to_csv())?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn parse_plan(text: &str, id: Option<usize>) -> Result<ShotPlan, Failure> {
    ShotPlan::parse(text)
        .map(|s| s.with_identity(id))
        .map_err(|e| Failure::Usage(format!("invalid --shots: {e}")))
}

fn cmd_sample(a: SampleArgs) -> CliResult {
    let (model, run) = load_model::<f32>(&a.ckpt)?;
    let world = SyntheticWorld::new(run.world.clone())?;
    let opts = SampleOptions {
        steps: a.steps,
        shift: a.shift,
        guidance: a.guidance,
        seed: a.seed,
    };
    let plans = a
        .shots
        .iter()
        .map(|s| parse_plan(s, a.id))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&a.out)?;
    let metrics = if a.ref_attn {
        let reference = plans[0].shots[0];
        if let Some(bad) = plans.iter().position(|s| s.shots[0] != reference) {
            return Err(Failure::Usage(format!(
                "--shots group {} does not start with the reference shot of group 0",
                bad
            )));
        }
        let attempts: Vec<_> = plans.iter().map(|s| s.shots[1..].to_vec()).collect();
        let fields = sample_infinite(&model, &world, &reference, a.id, &attempts, &opts)?;
        let mut scores = Vec::new();
        for (i, (field, plan)) in fields.iter().zip(&plans).enumerate() {
            save_records(&a.out.join(format!("tokens_{i}.ecsh")), &[("tokens", &field.tokens)])?;
            scores.push(score_field(&world, field, &plan.prompts())?);
        }
        aggregate(&scores, a.seed)
    } else {
        if plans.len() != 1 {
            return Err(Failure::Usage("more than one --shots group needs --ref-attn".into()));
        }
        let field = sample(&model, &world, &plans[0], &opts)?;
        save_records(&a.out.join("tokens.ecsh"), &[("tokens", &field.tokens)])?;
        aggregate(&[score_field(&world, &field, &plans[0].prompts())?], a.seed)
    };
    let json = serde_json::to_string_pretty(&metrics).map_err(shotrope::Error::from)?;
    std::fs::write(a.out.join("metrics.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_curve(a: CurveArgs) -> CliResult {
    if a.dim == 0 || a.dim % 2 != 0 {
        return Err(Failure::Usage(format!("--dim must be a positive even number, got {}", a.dim)));
    }
    let grid = uniform_grid(a.xmax, a.step)?;
    let curve = delta_curve(a.dim, &grid)?;
    curve.write_csv(&a.out)?;
    let points: Vec<f64> = if a.k > 0.0 {
        (0..5).map(|ds| a.k * ds as f64).collect()
    } else {
        vec![0.0]
    };
    let at = delta_curve(a.dim, &points)?;
    for (ds, d) in at.delta.iter().enumerate() {
        println!("shot gap {ds}: x = {:<6} delta = {d:.6}", at.xs[ds]);
    }
    println!("wrote {} ({} points)", a.out.display(), curve.xs.len());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let mut run = load_config(a.config.as_deref(), RunConfig::ablation_default())?;
    if let Some(steps) = a.steps {
        run.train.steps = steps;
    }
    run.validate()?;
    create_dir(&a.out)?;
    let base = run.model.shot_rope;
    let mut entries = vec![
        (Variant::Vanilla, base),
        (Variant::TcRope, base),
        (Variant::Full, base),
    ];
    if a.grid {
        entries.extend(jk_grid().into_iter().filter(|(_, p)| *p != base));
    }
    eprintln!("training {} models for {} steps each", entries.len(), run.train.steps);
    let rows = ablate::<f32>(&run, &entries)?;
    let csv = ablation_csv(&rows);
    std::fs::write(a.out.join("ablation.csv"), &csv)?;
    std::fs::write(a.out.join("config.json"), run.to_json())?;
    print!("{csv}");
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> CliResult {
    let results = run_selftest(a.sabotage);
    let mut failed = 0;
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} suites passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure::Tests(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
