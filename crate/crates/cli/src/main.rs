//! `ffdn` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Toolkit version plus the job-file format version.
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config format 1)");

#[derive(Parser, Debug)]
#[command(name = "ffdn", version = VERSION, about = "Filter feedback delay networks: build, render, analyse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the feedback matrix comes from.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Job file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline matrix spec, e.g. "family=vfm size=4 stages=2 density=1/30".
    #[arg(long)]
    pub spec: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Engine {
    Cascade,
    /// Block FFT convolution of the feedback matrix.
    #[value(alias = "fft")]
    Fast,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Expand a feedback matrix and check that it is paraunitary.
    Gen {
        #[command(flatten)]
        source: Source,
        /// Matrix text output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the impulse response to a 32-bit float WAV file.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `n,h` samples as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        engine: Option<Engine>,
        /// Length in samples.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Poles, residues and the modal decay histogram.
    Modal {
        #[arg(long)]
        config: PathBuf,
        /// Pole/residue CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Decay histogram CSV.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Parallel sweeps instead of sequential ones.
        #[arg(long)]
        jacobi: bool,
        /// Refuse systems with more poles than this.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Operation count and pulses per filter of a feedback matrix.
    Cost {
        #[command(flatten)]
        source: Source,
    },
    /// Echo density profile and mixing time.
    Density {
        /// WAV file or job file (`.wav` extension selects WAV).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        window_ms: f64,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Profile CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo mixing-time comparison against the four-line scalar network.
    Mc {
        /// Comma-separated labels: EBFM, DFM, RDFM, VFM, SFM-4, SFM-16.
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<String>>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Longest render before a network counts as unmixed.
        #[arg(long, default_value_t = 30.0)]
        max_seconds: f64,
        /// JSON summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { source, out } => commands::gen(&source, out.as_deref()),
        Command::Render {
            config,
            out,
            csv,
            engine,
            length,
        } => commands::render(&config, out, csv, engine, length),
        Command::Modal {
            config,
            out,
            hist,
            tol,
            max_iter,
            jacobi,
            cap,
        } => commands::modal(&commands::ModalArgs {
            config,
            out,
            hist,
            tol,
            max_iter,
            jacobi,
            cap,
        }),
        Command::Cost { source } => commands::cost(&source),
        Command::Density {
            input,
            window_ms,
            threshold,
            out,
        } => commands::density(&input, window_ms, threshold, out.as_deref()),
        Command::Mc {
            families,
            trials,
            seed,
            max_seconds,
            out,
        } => commands::mc(families, trials, seed, max_seconds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
