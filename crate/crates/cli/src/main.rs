//! `vdt`: train, sample from and evaluate value-driven transport models.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vdt::io::{atomic_write, trajectories_csv, write_points_csv};
use vdt::metrics::{eval_w2, evaluate};
use vdt::sampler::{generate_from, Direction, GenerationConfig};
use vdt::trainer::{train_with, Checkpoint, TrainOptions};
use vdt::{load_checkpoint, save_checkpoint, DatasetSpec, Points, Result, Scalar, TrainConfig, VdtError};

#[derive(Parser, Debug)]
#[command(name = "vdt", version, about = "Value-driven transport: training, generation and evaluation")]
struct Cli {
    /// Worker threads (defaults to the available parallelism). Results do not depend on it.
    #[arg(long, global = true, env = "VDT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a value network and write checkpoint.json, train_log.csv and metrics.json.
    Train(TrainArgs),
    /// Generate samples from a checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint against fresh target samples.
    Eval(EvalArgs),
    /// Export seeded samples of a named dataset.
    Dataset(DatasetArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration (training hyperparameters plus optional `out_dir`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Fill the `seconds` log column with wall-clock time.
    #[arg(long)]
    record_time: bool,
    /// Continue training from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Sample count of the final evaluation.
    #[arg(long, default_value_t = 10_000)]
    eval_n: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// H_test: the run makes H_test + 1 policy steps.
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transport target samples back toward the source.
    #[arg(long)]
    reverse: bool,
    #[arg(long)]
    label: Option<usize>,
    /// Classifier-free guidance scale (needs --label).
    #[arg(long)]
    guidance: Option<f64>,
    /// Write full trajectories (`i,h,x0,x1`).
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Scatter plot of generated (first color) and starting points (second color).
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset the generated samples are compared with.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long)]
    name: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Dataset(a) => cmd_dataset(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

/// Parses a run configuration; errors name the offending field.
fn read_run_config(path: &Path) -> Result<(TrainConfig, Option<PathBuf>)> {
    let text = fs::read_to_string(path).map_err(|e| VdtError::Config(format!("{}: {e}", path.display())))?;
    let parse = |detail: String| VdtError::Config(format!("{}: {detail}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
    let out_dir = match value.as_object_mut().and_then(|o| o.remove("out_dir")) {
        None => None,
        Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(parse("out_dir: expected a string".into())),
    };
    let config: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        parse(format!("{field}: {}", e.into_inner()))
    })?;
    config.validate().map_err(|e| parse(e.to_string()))?;
    Ok((config, out_dir))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (mut config, out_dir) = read_run_config(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let out = a
        .out
        .clone()
        .or(out_dir)
        .ok_or_else(|| VdtError::Config("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&out).map_err(|e| VdtError::Config(format!("{}: {e}", out.display())))?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    match a.precision {
        Precision::F32 => train_run::<f32>(&config, &out, a, resume),
        Precision::F64 => train_run::<f64>(&config, &out, a, resume),
    }
}

fn train_run<T: Scalar>(config: &TrainConfig, out: &Path, a: &TrainArgs, resume: Option<Checkpoint>) -> Result<()> {
    let ckpt_path = out.join("checkpoint.json");
    let options = TrainOptions { record_time: a.record_time, resume };
    let result = train_with::<T, _>(config, &options, |p| {
        if p.iteration % config.checkpoint_every == 0 {
            save_checkpoint(&Checkpoint::new(p.net, config, p.iteration, Some(p.optimizer)), &ckpt_path)?;
        }
        Ok(())
    });
    let (ckpt, log) = match result {
        Ok(r) => r,
        Err(VdtError::Diverged { iteration, detail, last_good }) => {
            if let Some(good) = &last_good {
                let path = out.join("checkpoint.last_good.json");
                save_checkpoint(good, &path)?;
                eprintln!("last good checkpoint written to {}", path.display());
            }
            return Err(VdtError::Diverged { iteration, detail, last_good });
        }
        Err(e) => return Err(e),
    };
    save_checkpoint(&ckpt, &ckpt_path)?;
    atomic_write(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
    let net = ckpt.network::<T>()?;
    let report = evaluate(&net, &config.source, &config.target, config.horizon, a.eval_n, config.seed)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!("w2_to_target {:.6}", report.w2_to_target);
    println!("path_energy_mean {:.6}", report.path_energy_mean);
    Ok(())
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    atomic_write(path, format!("{text}\n").as_bytes())
}

/// Loads a checkpoint; a missing or unreadable file is a usage error.
fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        VdtError::Io { path, source } => VdtError::Config(format!("cannot read checkpoint {}: {source}", path.display())),
        other => other,
    })
}

fn to_pairs<T: Scalar>(p: &Points<T>) -> Vec<[f64; 2]> {
    p.rows().map(|r| [r[0].as_f64(), r.get(1).map_or(0.0, |v| v.as_f64())]).collect()
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if a.guidance.is_some() && a.label.is_none() {
        return Err(VdtError::Config("--guidance needs --label".into()));
    }
    let ckpt = open_checkpoint(&a.checkpoint)?;
    if a.guidance.is_some() && ckpt.train_config.cfg_uncond_prob == 0.0 {
        return Err(VdtError::Config("--guidance needs a network trained with cfg_uncond_prob > 0".into()));
    }
    if a.n == 0 {
        return Err(VdtError::Config("--n must be positive".into()));
    }
    match ckpt.precision.as_str() {
        "f32" => generate_run::<f32>(&ckpt, a),
        _ => generate_run::<f64>(&ckpt, a),
    }
}

fn generate_run<T: Scalar>(ckpt: &Checkpoint, a: &GenerateArgs) -> Result<()> {
    let net = ckpt.network::<T>()?;
    let tc = &ckpt.train_config;
    let (start_side, end_side) = if a.reverse { (&tc.target, &tc.source) } else { (&tc.source, &tc.target) };
    let start = start_side.sample::<T>(a.n, a.seed)?.points;
    let gcfg = GenerationConfig {
        steps: a.steps,
        direction: if a.reverse { Direction::Reverse } else { Direction::Forward },
        label: a.label,
        guidance: a.guidance,
        n: a.n,
        seed: a.seed,
        keep_trajectories: a.trajectories.is_some(),
    };
    let out = generate_from(&net, &start, &gcfg)?;
    let labels = a.label.map(|l| vec![l; a.n]);
    write_points_csv(&a.out, &out.points, labels.as_deref())?;
    if let (Some(path), Some(traj)) = (&a.trajectories, &out.trajectories) {
        atomic_write(path, trajectories_csv(traj, a.n, a.steps + 2, net.config().input_dim).as_bytes())?;
    }
    if let Some(path) = &a.svg {
        svg::render_svg(&[to_pairs(&out.points), to_pairs(&start)], path)?;
    }
    if a.label.is_none() {
        let fresh = end_side.sample::<T>(a.n, vdt::trainer::mix_seed(a.seed, 12))?.points;
        println!("w2_to_{} {:.6}", end_side, eval_w2(&out.points, &fresh)?);
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let target: DatasetSpec = a.dataset.parse()?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    if a.n == 0 {
        return Err(VdtError::Config("--n must be positive".into()));
    }
    let report = match ckpt.precision.as_str() {
        "f32" => evaluate(&ckpt.network::<f32>()?, &ckpt.train_config.source, &target, a.steps, a.n, a.seed)?,
        _ => evaluate(&ckpt.network::<f64>()?, &ckpt.train_config.source, &target, a.steps, a.n, a.seed)?,
    };
    write_json(&a.out, &report)?;
    println!("w2_to_target {:.6}", report.w2_to_target);
    println!("path_energy_mean {:.6}", report.path_energy_mean);
    Ok(())
}

fn cmd_dataset(a: &DatasetArgs) -> Result<()> {
    let spec: DatasetSpec = a.name.parse()?;
    if a.n == 0 {
        return Err(VdtError::Config("--n must be positive".into()));
    }
    let sample = spec.sample::<f64>(a.n, a.seed)?;
    write_points_csv(&a.out, &sample.points, sample.labels.as_deref())?;
    if let Some(path) = &a.svg {
        svg::render_svg(&[to_pairs(&sample.points)], path)?;
    }
    Ok(())
}
