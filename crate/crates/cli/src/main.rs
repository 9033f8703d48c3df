use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sst_core::{CodeParams, Orientation};

mod commands;
mod config;
mod output;

use config::parse_code;
use output::{OutputFormat, Printer};

#[derive(Parser)]
#[command(
    name = "sst",
    version,
    about = "Structured sparse ternary weight coding"
)]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t)]
    format: OutputFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Table entries, index width and table size per code.
    Tables(TablesArgs),
    /// Prune, quantize and encode a float model.
    Compress(CompressArgs),
    /// Decode a model back to float32 weights.
    Decompress(DecompressArgs),
    /// Classify a dataset with the compressed kernels.
    Infer(InferArgs),
    /// Train a fully connected network, optionally structured-sparse.
    Train(TrainArgs),
    /// Storage and compression ratio of a model or layer layout.
    Report(ReportArgs),
    /// Check codec roundtrip, code validity and kernel equivalence.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct TablesArgs {
    /// Code as n,k (repeatable); defaults to the six reference codes.
    #[arg(long = "code", value_parser = parse_code)]
    pub codes: Vec<CodeParams>,
    /// Largest table allowed.
    #[arg(long, default_value_t = sst_core::code_table::DEFAULT_ENTRY_CAP)]
    pub cap: u64,
}

#[derive(Args)]
pub struct PolicyArgs {
    /// Per-layer policy file.
    #[arg(long, conflicts_with_all = ["code", "layer_format"])]
    pub policy: Option<PathBuf>,
    /// Apply sst(n,k) to every layer.
    #[arg(long, value_parser = parse_code)]
    pub code: Option<CodeParams>,
    #[arg(long, default_value_t)]
    pub orientation: Orientation,
    /// Apply one format to every layer: float, fixed8 or ternary.
    #[arg(long = "layer-format")]
    pub layer_format: Option<String>,
}

#[derive(Args)]
pub struct CompressArgs {
    /// Float model file or raw matrix text.
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Args)]
pub struct DecompressArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Write raw matrix text instead of a model file.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Directory with the four IDX digit files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Explicit IDX image file (with --labels).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Synthetic Gaussian blobs as samples,dim,classes.
    #[arg(long, conflicts_with_all = ["data", "images"])]
    pub blobs: Option<String>,
    /// Distance of blob centers from the origin.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// Seed of the blob generator.
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(short, long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Print per-layer kernel operation counts.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Hidden layer sizes.
    #[arg(long, value_delimiter = ',', default_value = "256,256")]
    pub hidden: Vec<usize>,
    /// Normalizer on hidden layers: none, bn or wn.
    #[arg(long, default_value = "bn")]
    pub norm: String,
    /// Target code for hidden layers; omit to train a float model.
    #[arg(long, value_parser = parse_code, conflicts_with = "schedule")]
    pub code: Option<CodeParams>,
    /// Gradual schedule as n:k1,k2,... e.g. 8:4,3,2,1.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, default_value_t)]
    pub orientation: Orientation,
    /// Float epochs before pruning.
    #[arg(long, default_value_t = 0)]
    pub float_epochs: usize,
    /// Epochs per stage (or total for a float model).
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Final model; runs after the first get a .seedN suffix.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Per-epoch metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Directory for a model checkpoint after every stage.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Model file to account for.
    #[arg(
        short,
        long,
        conflicts_with = "layout",
        required_unless_present = "layout"
    )]
    pub model: Option<PathBuf>,
    /// Layer layout file.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Policy applied to the layout.
    #[arg(long, requires = "layout")]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub no_table: bool,
    #[arg(long)]
    pub no_bias: bool,
    #[arg(long)]
    pub no_normalizers: bool,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(short, long)]
    pub model: PathBuf,
    /// Random input vectors per layer for the kernel check.
    #[arg(long, default_value_t = 16)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Exit status: 1 for validation failures, 2 for I/O failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some()
            || c.downcast_ref::<sst_core::Error>()
                .is_some_and(sst_core::Error::is_io)
    });
    if io {
        2
    } else {
        1
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
    let out = Printer { format: cli.format };
    let result = match cli.command {
        Command::Tables(a) => commands::tables(&a, out),
        Command::Compress(a) => commands::compress(&a, out),
        Command::Decompress(a) => commands::decompress(&a, out),
        Command::Infer(a) => commands::infer(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Report(a) => commands::report(&a, out),
        Command::Verify(a) => commands::verify(&a, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
