use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dnf_core::config::{EvalOnly, PredictorSpec, RunConfig, Stage};
use dnf_core::experiment::Run;
use dnf_core::predictor::NoisePredictor;
use dnf_core::protocol;

#[derive(Parser)]
#[command(name = "dnf", version, about = "Diffusion noise features for generated-image detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run seed; overrides the config file's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "dnf-run")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Feature cache directory (default: <out>/cache).
    #[arg(long, global = true, env = "DNF_CACHE_DIR")]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate real textures, fit the generator if needed, and sample
    /// generated images.
    GenData,
    /// Fit the trainable generator on the real training images.
    TrainPredictor,
    /// Extract and cache features for every split and strategy.
    Extract,
    /// Train one detector per configured feature set.
    TrainDetector,
    /// Evaluate trained detectors on the test split, or a stored model on
    /// stored features.
    Eval(EvalArgs),
    /// Evaluate detectors on perturbed test images.
    PerturbSweep,
    /// Mean log-magnitude spectra and flatness of test features.
    Spectrum,
    /// Principal-component embedding of test features.
    Embed,
    /// Run every stage listed in the config.
    Run,
    /// Answer noise-prediction requests on stdin/stdout.
    #[command(hide = true)]
    ServePredictor(ServeArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Stacked feature container.
    #[arg(long, requires_all = ["labels", "model"])]
    features: Option<PathBuf>,
    /// JSON array of labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Detector model directory.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Saved trainable predictor; the analytic predictor is used otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn serve(args: &ServeArgs, cfg: &RunConfig) -> Result<()> {
    let spec = match &args.model {
        Some(path) => PredictorSpec::File { path: path.clone() },
        None => PredictorSpec::Analytic {
            mu: args.mu,
            sigma2: args.sigma2,
        },
    };
    let predictor = spec.load(std::path::Path::new("."))?;
    let schedule = cfg.schedule().build()?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    protocol::serve(stdin, stdout, |t, x| {
        predictor
            .predict(&x, t as usize, &schedule)
            .map_err(|e| e.to_string())
    })?;
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.common)?;
    let stages = match &cli.command {
        Command::ServePredictor(args) => return serve(args, &cfg),
        Command::GenData => vec![Stage::GenData],
        Command::TrainPredictor => vec![Stage::TrainPredictor],
        Command::Extract => vec![Stage::Extract],
        Command::TrainDetector => vec![Stage::TrainDetector],
        Command::Eval(args) => {
            if let (Some(features), Some(labels), Some(model)) = (&args.features, &args.labels, &args.model) {
                cfg.eval_only = Some(EvalOnly {
                    features: features.clone(),
                    labels: labels.clone(),
                    model: model.clone(),
                });
            }
            vec![Stage::Eval]
        }
        Command::PerturbSweep => vec![Stage::PerturbSweep],
        Command::Spectrum => vec![Stage::Spectrum],
        Command::Embed => vec![Stage::Embed],
        Command::Run => cfg.ordered_stages(),
    };
    let workers = cli
        .common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let run = Run::new(cfg, cli.common.out.clone(), cli.common.cache.clone(), workers);
    let manifest = run.execute(&stages)?;
    let done: Vec<String> = manifest.stages.iter().map(|s| s.to_string()).collect();
    eprintln!("completed: {}", done.join(", "));
    println!("{}", run.out.join(dnf_core::experiment::MANIFEST_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
