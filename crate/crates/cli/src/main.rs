use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbnn_core::config::ExperimentConfig;
use sbnn_core::harness::{apply_overrides, parse_bounds_query, run, BoundsQuery, Command, Overrides, RunContext};
use sbnn_core::Error;

#[derive(Parser, Debug)]
#[command(name = "sbnn", version, about = "Low-rank variational Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and manifests.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Trained model file; defaults to `<out>/model.json`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    /// Rank for every low-rank layer.
    #[arg(long, global = true)]
    rank: Option<usize>,

    /// Monte-Carlo samples for evaluation.
    #[arg(long = "S", global = true)]
    samples: Option<usize>,

    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate or load the configured dataset.
    GenData,
    Train,
    /// Evaluate a trained model.
    Eval,
    /// Closed-form bound calculators, or bounds of a trained model.
    Bounds(BoundsArgs),
    /// Singular spectra of the posterior-mean weights.
    SvdAnalyze,
    /// Train and evaluate a grid of ranks.
    AblateRank,
    ParamCount,
}

#[derive(Args, Debug)]
#[group(multiple = false)]
struct BoundsArgs {
    /// m=.. n=.. r=..
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    ratio: Option<Vec<String>>,
    /// emp=.. kl=.. N=.. delta=..
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    mcallester: Option<Vec<String>>,
    /// c_max=.. D=..
    #[arg(long = "kl-upper", num_args = 1.., value_name = "KEY=VALUE")]
    kl_upper: Option<Vec<String>>,
    /// x_frob=.. m=.. w1_frob=.. h=a,b C=a,b r=b C0=.. [L=.. delta=.. N=.. emp=..]
    #[arg(long = "gaussian-complexity", num_args = 1.., value_name = "KEY=VALUE")]
    gaussian_complexity: Option<Vec<String>>,
}

impl BoundsArgs {
    fn query(&self) -> sbnn_core::Result<BoundsQuery> {
        let pairs = [
            ("ratio", &self.ratio),
            ("mcallester", &self.mcallester),
            ("kl-upper", &self.kl_upper),
            ("gaussian-complexity", &self.gaussian_complexity),
        ];
        match pairs.iter().find_map(|(k, v)| v.as_ref().map(|v| (*k, v))) {
            Some((kind, args)) => parse_bounds_query(kind, args),
            None => Ok(BoundsQuery::Model),
        }
    }
}

fn execute(cli: &Cli) -> sbnn_core::Result<String> {
    let command = match &cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Bounds(b) => Command::Bounds(b.query()?),
        Cmd::SvdAnalyze => Command::SvdAnalyze,
        Cmd::AblateRank => Command::AblateRank,
        Cmd::ParamCount => Command::ParamCount,
    };
    let overrides = Overrides {
        seed: cli.seed,
        rank: cli.rank,
        samples: cli.samples,
        epochs: cli.epochs,
    };
    let (config, base) = match &cli.config {
        Some(path) => {
            let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            let cfg = ExperimentConfig::load(path)?;
            (Some(apply_overrides(&cfg, &overrides, &base)?), base)
        }
        None => (None, PathBuf::from(".")),
    };
    let ctx = RunContext {
        config,
        base,
        out: cli.out.clone(),
        model_path: cli.model.clone(),
    };
    Ok(run(&command, &ctx)?.summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SBNN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool that is already initialized keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
