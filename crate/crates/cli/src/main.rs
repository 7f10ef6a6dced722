//! Batch front-end: collect noise pairs, filter them, train the noise
//! network, run inference and verify the roundtrip identities.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hqnoise::Error;

use commands::{Context, Mode};
use config::RunConfig;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VERIFY: u8 = 4;
const EXIT_TRAIN: u8 = 5;

#[derive(Parser)]
#[command(name = "hqnoise", version, about = "High-quality initial noise: collect, filter, train, infer, verify")]
struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; dataset and inference seeds start here.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-seed work.
    #[arg(long, global = true, env = "HQNOISE_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run inference and inversion for a seed range and store the pairs.
    Collect {
        #[arg(long)]
        count: Option<u64>,
    },
    /// Score pairs and keep those whose inverted noise generates better.
    Filter {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// External `seed,s_rd,s_hq` scores instead of generation.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train the noise network on a filtered dataset.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate from standard, inverted or network-refined noise.
    Infer {
        /// standard, inversion or with-edn.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<u64>,
    },
    /// Check the roundtrip identities at tight tolerance.
    Verify {
        #[arg(long)]
        draws: Option<usize>,
        /// Scales every predicted coefficient; anything but 1 must fail.
        #[arg(long)]
        coefficient_scale: Option<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::ScheduleMisuse(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        Error::Verification(_) => EXIT_VERIFY,
        Error::Training(_) | Error::NonFinite(_) => EXIT_TRAIN,
        _ => EXIT_OTHER,
    }
}

fn run(cli: Cli) -> hqnoise::Result<()> {
    let mut config = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match &cli.command {
        Command::Filter { threshold, scores, .. } => {
            if let Some(m) = threshold {
                config.filter.threshold = *m;
            }
            if scores.is_some() {
                config.filter.scores = scores.clone();
            }
        }
        Command::Train { epochs: Some(e), .. } => config.train.epochs = *e,
        Command::Verify { draws, coefficient_scale } => {
            if let Some(d) = draws {
                config.verify.draws = *d;
            }
            if let Some(c) = coefficient_scale {
                config.verify.coefficient_scale = *c;
            }
        }
        _ => {}
    }
    let preset = config.apply_preset()?;
    config.validate()?;
    let ctx = Context {
        workers: cli.workers.or(config.workers).unwrap_or(1),
        out: cli.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        preset,
        config,
    };
    if ctx.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    match cli.command {
        Command::Collect { count } => commands::collect(&ctx, count),
        Command::Filter { input, .. } => commands::filter(&ctx, input),
        Command::Train { input, .. } => commands::train(&ctx, input),
        Command::Infer { mode, checkpoint, count } => {
            let mode = Mode::parse(mode.as_deref().unwrap_or(&ctx.config.infer.mode))?;
            let checkpoint = checkpoint.or_else(|| match mode {
                Mode::WithEdn => ctx.config.infer.checkpoint.clone(),
                _ => None,
            });
            commands::infer(&ctx, mode, checkpoint, count)
        }
        Command::Verify { .. } => commands::verify(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
