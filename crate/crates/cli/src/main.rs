mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use locprod::estimator::TechnologyForm;
use locprod::simulator::{EstimatorKind, TruthSurface};

use config::{BandwidthChoice, RunConfig, SEED_VAR, WORKERS_VAR};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "locprod", version, about = "Locationally varying production function estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config, or a previous run's manifest.json.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Panel CSV.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    technology: Option<TechnologyForm>,
    /// Neighbor count for step one: a number, `cv` or `rule-of-thumb`.
    #[arg(long, global = true)]
    h1: Option<BandwidthChoice>,
    #[arg(long, global = true)]
    h2: Option<BandwidthChoice>,
    /// Bootstrap replicates.
    #[arg(long, short = 'B', global = true)]
    replicates: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Monte Carlo / coverage simulation count.
    #[arg(long, global = true)]
    q: Option<usize>,
    /// Firm counts for `simulate` and `coverage`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    /// Simulate with coefficients frozen at this location.
    #[arg(long, global = true)]
    invariant_at: Option<f64>,
    /// Decompose period by period instead of pooling.
    #[arg(long, global = true)]
    per_period: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Fit both steps and write coefficient surfaces and productivity.
    Estimate,
    /// Cross-validate the neighbor counts of both steps.
    Cv,
    /// Wild bootstrap draws and percentile intervals.
    Infer,
    /// Bootstrap test of location invariance.
    TestInvariance,
    /// Productivity differentials against a benchmark location.
    Decompose,
    /// Monte Carlo error metrics on synthetic panels.
    Simulate,
    /// Bootstrap interval coverage on synthetic panels.
    Coverage,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Cv => "cv",
            Command::Infer => "infer",
            Command::TestInvariance => "test-invariance",
            Command::Decompose => "decompose",
            Command::Simulate => "simulate",
            Command::Coverage => "coverage",
        }
    }
}

fn env_override<T: std::str::FromStr>(var: &str) -> Result<Option<T>, CliError> {
    match std::env::var(var) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{var}=`{s}` is not a valid value"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then environment, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_override::<u64>(SEED_VAR)? {
        cfg.seed = s;
    }
    if let Some(w) = env_override::<usize>(WORKERS_VAR)? {
        cfg.workers = Some(w);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(p) = &cli.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = cli.technology {
        cfg.estimation.technology = t;
    }
    if let Some(h) = cli.h1 {
        cfg.estimation.h1 = h;
    }
    if let Some(h) = cli.h2 {
        cfg.estimation.h2 = h;
    }
    if let Some(b) = cli.replicates {
        cfg.inference.replicates = b;
        cfg.coverage.replicates = b;
    }
    if let Some(a) = cli.alpha {
        cfg.inference.alpha = a;
        cfg.coverage.alpha = a;
    }
    if let Some(q) = cli.q {
        cfg.simulation.q = q;
        cfg.coverage.q = q;
    }
    if let Some(s) = &cli.sizes {
        cfg.simulation.sizes = s.clone();
        cfg.coverage.sizes = s.clone();
    }
    if let Some(e) = &cli.estimators {
        cfg.simulation.estimators = e.clone();
    }
    if let Some(at) = cli.invariant_at {
        cfg.simulation.truth = TruthSurface::Invariant { at };
    }
    if cli.per_period {
        cfg.decomposition.pooled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<RunConfig, (Option<RunConfig>, CliError)> {
    let cfg = resolve(cli).map_err(|e| (None, e))?;
    if let Some(w) = cfg.workers {
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    commands::dispatch(cli.command.name(), &cfg).map_err(|e| (Some(cfg.clone()), e))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err((cfg, e)) => {
            let payload = serde_json::to_string_pretty(&e.payload()).unwrap_or_else(|_| e.to_string());
            eprintln!("{payload}");
            if let Some(cfg) = cfg {
                let _ = std::fs::create_dir_all(&cfg.output_dir)
                    .and_then(|_| std::fs::write(cfg.output_dir.join("error.json"), &payload));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
