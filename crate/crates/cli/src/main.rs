//! `sbmt`: train, evaluate and inspect SBM attention encoders.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error
//! (bad flags, unknown config keys, malformed input files).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A verification ran and did not pass.
    Check(String),
    Runtime(String),
}

impl From<sbmt_core::Error> for CliError {
    fn from(e: sbmt_core::Error) -> Self {
        use sbmt_core::Error as E;
        match e {
            E::UnknownKey(_) | E::InvalidValue { .. } | E::Input(_) | E::Format { .. } => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "sbmt", version, about = "Sparse attention with sampled stochastic-block-model masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides shared by the model-building commands.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set n_heads=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    /// Shorthand for `--set density_weight=<λ>`.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Master seed; every random stream derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to `$SBMT_OUT_DIR/<command>-<hash>` or `runs/...`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn all_overrides(&self) -> Vec<(String, String)> {
        let mut all = self.overrides.clone();
        if let Some(l) = self.lambda {
            all.push(("density_weight".into(), l.to_string()));
        }
        if let Some(s) = self.seed {
            all.push(("seed".into(), s.to_string()));
        }
        all
    }
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Inject {
    Full,
    Identity,
}

#[derive(Subcommand)]
enum Command {
    /// Train on freshly sampled duplicate-token batches.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Override the number of steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint with dropout and exploration off.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample one mask per head for an input sequence and report its cost.
    SampleMask {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use this checkpoint's weights instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence file (whitespace-separated ids); the first line is used.
        /// Without it a random duplicate-task sequence is drawn.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Bypass sampling with a fixed mask (debugging).
        #[arg(long, value_enum)]
        inject: Option<Inject>,
    },
    /// Build and check the three sparsity patterns for `n` tokens.
    VerifyTheory {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Finite-difference check of every model gradient.
    Gradcheck {
        /// Smallest model: 1 layer, 1 head, d=8, k=2, 6 tokens.
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 6)]
        seq_len: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 5)]
        seed: u64,
    },
    /// Closed-form FLOP and memory model of one head.
    Flops {
        #[arg(long)]
        n: u64,
        /// Number of sampled edges.
        #[arg(long)]
        m: u64,
        #[arg(long)]
        k: u64,
        #[arg(long)]
        d: u64,
    },
    /// Write a labelled duplicate-task batch to a dump file.
    GenerateData {
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { cfg, steps } => commands::train(&cfg, steps),
        Command::Eval { checkpoint, cfg } => commands::eval(&checkpoint, &cfg),
        Command::SampleMask { cfg, checkpoint, input, inject } => {
            commands::sample_mask(&cfg, checkpoint.as_deref(), input.as_deref(), inject)
        }
        Command::VerifyTheory { n, k } => commands::verify_theory(n, k),
        Command::Gradcheck { tiny, layers, heads, d_model, clusters, seq_len, step, tol, seed } => {
            let shape = if tiny {
                commands::GradcheckShape::default()
            } else {
                commands::GradcheckShape { layers, heads, d_model, clusters, seq_len }
            };
            commands::gradcheck(shape, step, tol, seed)
        }
        Command::Flops { n, m, k, d } => commands::flops(n, m, k, d),
        Command::GenerateData { seq_len, batch_size, seed, out } => {
            commands::generate_data(seq_len, batch_size, seed, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
