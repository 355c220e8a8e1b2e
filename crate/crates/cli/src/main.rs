//! `mvse`: synthesize data, train, evaluate, retrieve, check gradients and
//! run ablations for the multi-space retrieval model.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
//! error.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvse_core::config::{FuseMode, SpaceSet};
use mvse_core::Error;

use run_config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mvse", version, about = "Multi-space sentence-to-video retrieval")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// single, dual-S, dual-I or triple.
    #[arg(long, global = true)]
    spaces: Option<SpaceSet>,
    /// weighted or average.
    #[arg(long, global = true)]
    fuse_mode: Option<FuseMode>,
    #[arg(long, global = true)]
    margin: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct InputFlags {
    /// Feature container (default: <out-dir>/features.mvse).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split manifest (default: <out-dir>/manifest.txt).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint (default: <out-dir>/checkpoint.mvse).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal feature container and split manifest.
    Synth,
    /// Train on the training split; writes a checkpoint and a loss log.
    Train(InputFlags),
    /// Evaluate a checkpoint on the evaluation split.
    Eval(InputFlags),
    /// Rank the evaluation gallery for one free-text sentence.
    Retrieve {
        sentence: String,
        #[command(flatten)]
        inputs: InputFlags,
    },
    /// Finite-difference check of every head and of the full loss.
    Gradcheck {
        #[arg(long, default_value = "small")]
        preset: String,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train and evaluate every space set; writes a comparison table.
    Ablate(InputFlags),
}

/// Failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(anyhow::anyhow!(msg.into()))
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::UnknownSpace(_)
            | Error::SpaceUnavailable(_)
            | Error::BatchTooSmall(_)
            | Error::EmptySentence
            | Error::AllOutOfVocabulary(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    let overrides = Overrides {
        seed: g.seed,
        spaces: g.spaces,
        fuse_mode: g.fuse_mode,
        margin: g.margin,
        lr: g.lr,
        epochs: g.epochs,
        batch_size: g.batch_size,
        k: g.k,
        out_dir: g.out_dir,
    };
    let mut cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    let mut apply = |inputs: &InputFlags| {
        if let Some(p) = &inputs.data {
            cfg.paths.data = Some(p.clone());
        }
        if let Some(p) = &inputs.manifest {
            cfg.paths.manifest = Some(p.clone());
        }
        if let Some(p) = &inputs.checkpoint {
            cfg.paths.checkpoint = Some(p.clone());
        }
    };
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train(i) => {
            apply(&i);
            commands::train(&cfg)
        }
        Command::Eval(i) => {
            apply(&i);
            commands::eval(&cfg)
        }
        Command::Retrieve { sentence, inputs } => {
            apply(&inputs);
            commands::retrieve(&cfg, &sentence)
        }
        Command::Gradcheck {
            preset,
            corrupt_backward,
        } => commands::gradcheck(&preset, cfg.seed, corrupt_backward),
        Command::Ablate(i) => {
            apply(&i);
            commands::ablate(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
