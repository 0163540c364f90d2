use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use unlearn_probe::pipeline::{inspect, ExperimentConfig, Pipeline};

/// Concept-erasure robustness experiments on a toy conditional diffusion model.
#[derive(Parser)]
#[command(name = "unlearn-probe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory (falls back to the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel workers for sampling and evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Skip stages whose recorded input hash still matches.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser and the evaluation classifier.
    TrainBase(RunArgs),
    /// Apply every configured erasure method to the base model.
    Erase(RunArgs),
    /// Textual inversion on the base and on every unlearned model.
    AttackTi(RunArgs),
    /// Adversarial search on the base model.
    AttackAs(RunArgs),
    /// Candidate selection and the attack x model transfer matrix.
    Evaluate(RunArgs),
    /// PCA atlas of the attack embeddings.
    Atlas(RunArgs),
    /// Restoration traces with and without the parameter phases.
    Ablate(RunArgs),
    /// Every stage in order.
    Run(RunArgs),
    /// Print the metadata of a checkpoint file as JSON.
    Inspect {
        path: PathBuf,
    },
}

fn pipeline(args: &RunArgs) -> Result<Pipeline> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = match (&args.out, &config.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => bail!("no output directory: pass --out or set `output_dir` in the config"),
    };
    Pipeline::new(config, &out, args.workers, args.resume)
        .with_context(|| format!("cannot prepare `{}`", out.display()))
}

fn report(p: &Pipeline) {
    let log = p.log();
    for s in &log.executed {
        eprintln!("ran      {s}");
    }
    for s in &log.skipped {
        eprintln!("skipped  {s}");
    }
    eprintln!("artifacts in {}", p.out_dir().display());
}

fn stage(args: &RunArgs, f: impl FnOnce(&mut Pipeline) -> unlearn_probe::Result<()>) -> Result<()> {
    let mut p = pipeline(args)?;
    let result = f(&mut p);
    report(&p);
    Ok(result?)
}

fn print_inspect(path: &Path) -> Result<()> {
    let info = inspect(path).with_context(|| format!("cannot read `{}`", path.display()))?;
    print!("{info}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainBase(a) => stage(a, Pipeline::train_base),
        Command::Erase(a) => stage(a, Pipeline::erase),
        Command::AttackTi(a) => stage(a, Pipeline::attack_ti),
        Command::AttackAs(a) => stage(a, Pipeline::attack_as),
        Command::Evaluate(a) => stage(a, Pipeline::evaluate),
        Command::Atlas(a) => stage(a, Pipeline::atlas),
        Command::Ablate(a) => stage(a, Pipeline::ablate),
        Command::Run(a) => stage(a, Pipeline::run),
        Command::Inspect { path } => print_inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
