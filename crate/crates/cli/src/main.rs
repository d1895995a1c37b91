#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::ConfigError;
use pipeline::{Run, StageError};

#[derive(Parser)]
#[command(name = "ggn", version, about = "Laplace-GGN and NGVI experiments on small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the MAP estimate.
    Train(RunArgs),
    /// Fit MAP and compute the configured posterior.
    Posterior(RunArgs),
    /// Posterior followed by predictive summaries.
    Predict(RunArgs),
    /// Marginal-likelihood sweep over the prior precision (and noise) grid.
    Sweep(RunArgs),
    /// Natural-gradient variational inference.
    Ngvi(RunArgs),
    /// Instance-based explanations of test predictions.
    Explain(RunArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write the bundled one-dimensional regression file.
    Snelson {
        #[arg(long, default_value = "data/snelson.txt")]
        out: PathBuf,
    },
    /// Verify (and optionally copy in) the MNIST IDX files.
    Mnist {
        #[arg(long, default_value = "data/mnist")]
        dir: PathBuf,
        /// Directory holding the raw files to copy into `--dir`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

enum Failure {
    Config(ConfigError),
    Runtime(StageError),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        if e.stage == "config" {
            Failure::Config(ConfigError::Invalid(e.to_string()))
        } else {
            Failure::Runtime(e)
        }
    }
}

fn runtime(stage: &'static str, e: impl Into<ggn_core::Error>) -> Failure {
    Failure::Runtime(StageError {
        stage,
        source: e.into(),
    })
}

fn run_command(args: &RunArgs, name: &'static str, f: fn(Run) -> Result<(), StageError>) -> Result<(), Failure> {
    let (cfg, resolved) = config::load(args.config.as_deref(), &args.overrides, args.seed, args.out.as_deref())?;
    let out = cfg.out.clone();
    f(Run::new(cfg, resolved, name)?)?;
    log::info!("{name} finished; outputs in {}", out.display());
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| runtime("data", e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn mnist(dir: &Path, from: Option<&Path>) -> Result<(), Failure> {
    if let Some(src) = from {
        fs::create_dir_all(dir).map_err(|e| runtime("data", e))?;
        for (name, _) in MNIST_FILES {
            fs::copy(src.join(name), dir.join(name)).map_err(|e| runtime("data", e))?;
        }
    }
    for (name, want) in MNIST_FILES {
        let got = sha256_hex(&dir.join(name))?;
        if got != want {
            return Err(runtime(
                "data",
                ggn_core::Error::Domain(format!("{name}: sha256 {got}, expected {want}")),
            ));
        }
        println!("{name}: ok");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => run_command(&a, "train", pipeline::cmd_train),
        Command::Posterior(a) => run_command(&a, "posterior", pipeline::cmd_posterior),
        Command::Predict(a) => run_command(&a, "predict", pipeline::cmd_predict),
        Command::Sweep(a) => run_command(&a, "sweep", pipeline::cmd_sweep),
        Command::Ngvi(a) => run_command(&a, "ngvi", pipeline::cmd_ngvi),
        Command::Explain(a) => run_command(&a, "explain", pipeline::cmd_explain),
        Command::Data(DataCommand::Snelson { out }) => Ok(pipeline::write_snelson(&out)?),
        Command::Data(DataCommand::Mnist { dir, from }) => mnist(&dir, from.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error in {e}");
            ExitCode::from(1)
        }
    }
}
