//! `gbert`: generate a synthetic corpus, train, evaluate, check gradients,
//! export embeddings and run inference.
//!
//! Exit status: 0 on success, 2 when the input is invalid (bad flags,
//! missing or mismatched files), 1 when valid work fails at runtime.

mod commands;
mod failure;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gbert", version, about = "Ontology-aware visit encoder for medication recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: ontologies, patient records and splits.
    Generate(GenerateArgs),
    /// Alternate pre-training and fine-tuning, keeping the best validation model.
    Train(TrainArgs),
    /// Score a checkpoint on a split and write report.json / report.csv.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write leaf-code embeddings as tab-separated text.
    ExportEmbeddings(ExportArgs),
    /// Recommend medications for every visit with history in a record file.
    Infer(InferArgs),
}

#[derive(Args)]
pub struct OutDir {
    /// Directory receiving every output of the command.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Train/validation/test fractions of the multi-visit patients.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    pub ratios: Vec<f64>,
    /// Write into an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory written by `generate`.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Numeric precision (`f64` or `f32`).
    #[arg(long)]
    pub precision: Option<String>,
    /// Replace ontology embeddings with a plain leaf table.
    #[arg(long)]
    pub no_graph: bool,
    /// Skip pre-training epochs.
    #[arg(long)]
    pub no_pretrain: bool,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Start over even if the output directory holds a previous run.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    /// Which split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Decision threshold; defaults to the one the model was trained with.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Break one primitive's backward rule (e.g. `gelu`) to see the check fail.
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Check at most this many entries per parameter.
    #[arg(long)]
    pub max_entries: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines record file to predict.
    #[arg(long)]
    pub records: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    /// Number of highest-probability medications listed per visit.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
        Command::Infer(a) => commands::infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
