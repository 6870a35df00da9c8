use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apl_core::evaluation::EvalError;
use apl_core::features::FeatureError;
use apl_core::objectives::ObjectiveError;
use apl_core::{Ablation, TensorError, TrainError};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 3 for numeric failures at runtime, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        let numeric = |e: &TensorError| {
            matches!(
                e,
                TensorError::NonFinite { .. }
                    | TensorError::LogNonPositive(_)
                    | TensorError::DivisionByZero
            )
        };
        let objective = |e: &ObjectiveError| matches!(e, ObjectiveError::Tensor(t) if numeric(t));
        let hit = match self {
            CliError::Numeric(_) => true,
            CliError::Tensor(t) => numeric(t),
            CliError::Train(TrainError::NonFinite { .. }) => true,
            CliError::Train(TrainError::Tensor(t)) => numeric(t),
            CliError::Train(TrainError::Objective(o)) => objective(o),
            CliError::Eval(EvalError::Tensor(t)) => numeric(t),
            CliError::Eval(EvalError::Objective(o)) => objective(o),
            _ => false,
        };
        if hit {
            3
        } else {
            2
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "apl",
    version,
    about = "Part discovery and learning for category discovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-part synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints plus a per-epoch metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// none, no-allmin, no-diversity, no-parts or all-all.
        #[arg(long)]
        ablate: Option<Ablation>,
        /// Continue from a checkpoint; its training config takes over.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, hide = true)]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        dump_embeddings: bool,
        #[arg(long)]
        similarity_report: bool,
    },
    /// Compare every backward rule with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Summarize a run directory as Markdown.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, seed } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = seed {
                cfg.synth.rng_seed = s;
            }
            commands::synth(&cfg)
        }
        Command::Train {
            common,
            data,
            seed,
            ablate,
            resume,
            stop_after_epoch,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(d) = data {
                cfg.paths.data = Some(d);
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(a) = ablate {
                cfg.train.ablation = a;
            }
            if let Some(r) = resume {
                cfg.paths.resume = Some(r);
            }
            if stop_after_epoch.is_some() {
                cfg.run.stop_after_epoch = stop_after_epoch;
            }
            commands::train(cfg)
        }
        Command::Eval {
            common,
            ckpt,
            data,
            dump_embeddings,
            similarity_report,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(c) = ckpt {
                cfg.paths.checkpoint = Some(c);
            }
            if let Some(d) = data {
                cfg.paths.data = Some(d);
            }
            cfg.eval.dump_embeddings |= dump_embeddings;
            cfg.eval.similarity_report |= similarity_report;
            commands::eval(cfg)
        }
        Command::Gradcheck {
            common,
            seed,
            inject_fault,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = seed {
                cfg.gradcheck.seed = s;
            }
            if inject_fault.is_some() {
                cfg.gradcheck.inject_fault = inject_fault;
            }
            if cfg.paths.out.is_none() {
                cfg.paths.out = Some(PathBuf::from("."));
            }
            commands::gradcheck(&cfg)
        }
        Command::Report { common } => commands::report(&resolve(&common)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("APL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("APL_THREADS ignored: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
