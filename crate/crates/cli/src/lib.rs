//! The `jebm` command-line tool.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod ablate;
mod common;
mod eval;
mod gen_data;
mod gradcheck;
mod manifest;
pub mod oracles;
mod sample;
mod train;
mod viz;

pub use manifest::RunManifest;

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "jebm", version, about = "Latent generator models with a joint energy-based prior")]
pub struct Cli {
    /// Cap on worker threads for chain-parallel sampling (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a TOML config.
    Train(train::TrainArgs),
    /// Draw samples from a trained model.
    Sample(sample::SampleArgs),
    /// Score in- and out-of-distribution data and report detection metrics.
    EvalOod(eval::EvalOodArgs),
    /// Score a labeled dataset with one class held out as the anomaly.
    EvalAd(eval::EvalAdArgs),
    /// Dump prior-chain snapshots and inferred codes for plotting.
    VizLatent(viz::VizArgs),
    /// Run the finite-difference and quadrature gradient oracles.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Write a synthetic dataset described by a config's [data] section.
    GenData(gen_data::GenDataArgs),
    /// Mode coverage of generated samples against the prior step count.
    AblateSteps(ablate::AblateArgs),
}

/// Langevin settings shared by the sampling subcommands.
#[derive(Args, Debug, Clone)]
pub struct SamplerArgs {
    /// Prior Langevin steps.
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    /// Langevin step size.
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    /// Sampling space: z or eps.
    #[arg(long, default_value = "z")]
    pub space: String,
    /// Cap on the per-layer gradient norm.
    #[arg(long)]
    pub clamp_grad: Option<f64>,
}

impl SamplerArgs {
    pub fn config(&self) -> jebm::Result<jebm::LangevinConfig> {
        let cfg = jebm::LangevinConfig {
            steps: self.steps,
            step_size: self.step_size,
            space: self.space.parse()?,
            clamp_grad: self.clamp_grad,
            ..jebm::LangevinConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Failure of a subcommand: a library error, or a check that ran but did
/// not pass.
#[derive(Debug)]
pub enum Failure {
    Lib(jebm::Error),
    Check(String),
}

impl From<jebm::Error> for Failure {
    fn from(e: jebm::Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn exit_code(f: &Failure) -> i32 {
    use jebm::Error;
    match f {
        Failure::Check(_) => EXIT_CHECK_FAILED,
        Failure::Lib(Error::DivergedChain { .. } | Error::NonFinite { .. }) => EXIT_DIVERGED,
        Failure::Lib(_) => EXIT_USAGE,
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Lib(jebm::Error::Usage(msg.into()))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let res = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Sample(a) => sample::run(a),
        Command::EvalOod(a) => eval::run_ood(a),
        Command::EvalAd(a) => eval::run_ad(a),
        Command::VizLatent(a) => viz::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::GenData(a) => gen_data::run(a),
        Command::AblateSteps(a) => ablate::run(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Check(msg) => eprintln!("check failed: {}", msg),
                Failure::Lib(e) => eprintln!("error: {}", e),
            }
            exit_code(&f)
        }
    }
}

/// Resolves a checkpoint argument: a checkpoint directory, or a training
/// output directory whose `final/` checkpoint is used.
pub fn checkpoint_dir(p: &std::path::Path) -> PathBuf {
    if !p.join("manifest.json").exists() && p.join("final").join("manifest.json").exists() {
        p.join("final")
    } else {
        p.to_path_buf()
    }
}
