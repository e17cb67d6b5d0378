//! `anchorc`: train, encode, decode and inspect anchor-cloud bitstreams.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use anchor_codec::Error;

#[derive(Parser, Debug)]
#[command(name = "anchorc", version, about = "Learned entropy coding for anchor-based Gaussian scenes")]
pub struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Force ordered gradient reductions so runs are bit-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a codec on an anchor cloud and write a checkpoint.
    Train(TrainArgs),
    /// Compress an anchor cloud with a trained checkpoint.
    Encode(EncodeArgs),
    /// Decompress a bitstream into an anchor cloud file.
    Decode(DecodeArgs),
    /// Check a decoded cloud against the original.
    Verify(VerifyArgs),
    /// Print the size and rate breakdown of a bitstream.
    Stats(StatsArgs),
    /// Evaluate the wavelet loss between two images.
    Wavelet(WaveletArgs),
    /// Generate a synthetic anchor cloud.
    Synth(SynthArgs),
}

/// Training configuration: file, then `--set` overrides, then dedicated flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set lambda_mask=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long)]
    pub steps: Option<u64>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Input anchor cloud (`.tcga`). Not needed with `--show-config`.
    #[arg(required_unless_present = "show_config")]
    pub input: Option<PathBuf>,

    #[arg(short, long, required_unless_present = "show_config")]
    pub output: Option<PathBuf>,

    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    pub cloud: PathBuf,
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub original: PathBuf,
    pub decoded: PathBuf,

    /// Bitstream the decoded cloud came from; supplies quantization steps and masks.
    #[arg(long)]
    pub container: Option<PathBuf>,

    /// Quantization steps when no container is given.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    pub input: PathBuf,

    /// Also write one CSV row per section.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct WaveletArgs {
    pub first: PathBuf,
    pub second: PathBuf,

    /// Training step at which to evaluate the weight schedule.
    #[arg(long, default_value_t = 0)]
    pub step: u64,

    /// Schedule as `l1_start,l1_end,l2_start,l2_end,total_steps`.
    #[arg(long)]
    pub schedule: Option<String>,

    /// Read raw little-endian f32 `[h][w][c]` images of this shape, e.g. `64x64x3`.
    #[arg(long)]
    pub shape: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Correlated,
    Iid,
    Masking,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Correlated)]
    pub kind: SynthKind,
    #[arg(short, long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub corr_len: f64,
    /// Fraction of offset slots replaced by noise (`masking` only).
    #[arg(long, default_value_t = 0.5)]
    pub noise_fraction: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFY_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CORRUPT: u8 = 3;
}

/// Exit code of a failed command.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Corruption(_) | Error::Format(_) | Error::Range(_)) => exit::CORRUPT,
        Some(Error::Io(io)) if io.kind() == std::io::ErrorKind::UnexpectedEof => exit::CORRUPT,
        _ => exit::USAGE,
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn message(e: &anyhow::Error) -> String {
    let mut out: Vec<String> = Vec::new();
    for cause in e.chain() {
        let m = cause.to_string();
        if !out.last().is_some_and(|prev| prev.ends_with(&m)) {
            out.push(m);
        }
    }
    out.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(exit::USAGE);
        }
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
