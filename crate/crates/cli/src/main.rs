use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use llatte_core::scaling::Axis;

mod commands;
mod config;
mod error;

use config::RunConfigFile;
use error::{CliError, CliResult};

pub const THREADS_ENV: &str = "LLATTE_LAB_THREADS";

#[derive(Parser)]
#[command(name = "llatte-lab", version, about = "Synthetic sequence-ranking laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Depth,
    Width,
    #[value(alias = "seq_length")]
    SeqLength,
    Content,
    Composition,
    Grid,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Depth => Axis::Depth,
            AxisArg::Width => Axis::Width,
            AxisArg::SeqLength => Axis::SeqLength,
            AxisArg::Content => Axis::Content,
            AxisArg::Composition => Axis::Composition,
            AxisArg::Grid => Axis::Grid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train.jsonl, eval.jsonl).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a ranker on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.jsonl and eval.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scaling sweep and fit NE against compute.
    Scale {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `experiment.axis`.
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long)]
        out: PathBuf,
        /// Parallel grid cells.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate the upstream/downstream pipeline.
    Multistage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention reports of a trained ranker.
    AttnProbe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Eval examples sampled for the report.
        #[arg(long, default_value_t = 64)]
        examples: usize,
    },
}

fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Invariant(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn init_pool(jobs: Option<usize>) -> CliResult<()> {
    if jobs == Some(0) {
        return Err(CliError::Invariant("--jobs must be positive".into()));
    }
    let threads = match (jobs, thread_cap()?) {
        (Some(j), Some(c)) => j.min(c),
        (Some(n), None) | (None, Some(n)) => n,
        (None, None) => return Ok(()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out } => {
            init_pool(None)?;
            commands::generate(&RunConfigFile::load(&config)?, &out)
        }
        Command::Train { config, data, out } => {
            init_pool(None)?;
            commands::train(&RunConfigFile::load(&config)?, &data, &out)
        }
        Command::Scale { config, axis, out, jobs } => {
            init_pool(jobs)?;
            let mut cfg = RunConfigFile::load(&config)?;
            if let Some(a) = axis {
                cfg.experiment.axis = a.into();
                cfg.validate()?;
            }
            commands::scale(&cfg, &out)
        }
        Command::Multistage { config, out } => {
            init_pool(None)?;
            commands::multistage(&RunConfigFile::load(&config)?, &out)
        }
        Command::AttnProbe {
            config,
            weights,
            out,
            examples,
        } => {
            init_pool(None)?;
            commands::attn_probe(&RunConfigFile::load(&config)?, &weights, examples, &out)
        }
    }
}

fn parse_args() -> CliResult<Cli> {
    use clap::error::ErrorKind;
    Cli::try_parse().map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            e.exit()
        }
        _ => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            CliError::Usage(first.trim_start_matches("error: ").to_string())
        }
    })
}

fn main() -> ExitCode {
    match parse_args().and_then(run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.code() as u8)
        }
    }
}
