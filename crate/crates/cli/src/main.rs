use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scan_core::ScanError;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "scan", version, about = "Stacked cross attention image-text matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with defaults; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for pair scoring. 1 is bit-reproducible and the default.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Named configuration, e.g. toy or flickr-it-avg.
    #[arg(long)]
    pub preset: Option<String>,
}

/// Scoring overrides shared by train, score and attend.
#[derive(Args, Debug, Clone, Default)]
pub struct ScorerFlags {
    /// t2i or i2t.
    #[arg(long)]
    pub direction: Option<String>,
    /// lse, avg, sum or max.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Keep only the first N regions of every image.
    #[arg(long)]
    pub max_regions: Option<usize>,
    /// Use the attention-free Sum-Max baseline.
    #[arg(long)]
    pub sum_max: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic aligned corpus and split it.
    GenData(commands::GenDataArgs),
    /// Train a model and write the best checkpoint and a JSONL log.
    Train(commands::TrainArgs),
    /// Report Recall@K in both retrieval directions.
    Eval(commands::EvalArgs),
    /// Score one image against one caption.
    Score(commands::ScoreArgs),
    /// Export the attention trace of one pair.
    Attend(commands::AttendArgs),
}

fn exit_code(e: &ScanError) -> u8 {
    match e {
        ScanError::Config(_) | ScanError::Spec(_) | ScanError::Dimension(_) | ScanError::Domain(_) => 2,
        ScanError::State(_) => 2,
        ScanError::Format { .. } | ScanError::Io(_) | ScanError::Vocabulary { .. } => 3,
        ScanError::Numeric(_) | ScanError::Training { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Attend(a) => commands::attend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
