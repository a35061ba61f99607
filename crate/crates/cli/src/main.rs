//! `reportgen`: synthesize a corpus, train a tokenizer and model, generate
//! reports, score them, and export attention maps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "reportgen", version, about = "Image-conditioned report generation on synthetic feature grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON lines of records).
    Synth(SynthArgs),
    /// Train a BPE vocabulary on the reports of one dataset split.
    Tokenize(TokenizeArgs),
    /// Train the report decoder with teacher forcing.
    Train(TrainArgs),
    /// Greedy-decode reports for one dataset split.
    Generate(GenerateArgs),
    /// Score predictions with BLEU, ROUGE-L, CIDEr-D and finding classification.
    Evaluate(EvaluateArgs),
    /// Export per-token cross-attention maps for one sample.
    Attention(AttentionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validate,
    Test,
    All,
}

/// How a dataset is partitioned into train / validate / test.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Seed of the partition shuffle.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train, validate and test fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split_ratios: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator config; the standard five-finding 7x7x16 setup when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines ontology; the built-in five findings when omitted.
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config sample count [standard config: 2000].
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Upper bound on the vocabulary size, special tokens included.
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    /// Split whose reports are used for training.
    #[arg(long, value_enum, default_value_t = SplitName::Train)]
    pub split: SplitName,
    #[command(flatten)]
    pub splits: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON model config; the 2-layer, 4-head, 64-wide desk config sized to the vocabulary when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON training config; lr 1e-4, batch 16, 20 epochs, seed 0, clip 1.0 when omitted.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Overrides the training config epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the training config seed (shuffling, dropout, initialization).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the training config learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Keep the epoch with the lowest validation loss as model.ckpt instead of the last.
    #[arg(long)]
    pub select_best: bool,
    #[command(flatten)]
    pub splits: SplitArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[command(flatten)]
    pub splits: SplitArgs,
    /// Cap on generated tokens; the model's max_len when omitted.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON lines of {id, candidate, references}.
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSON-lines ontology; the built-in five findings when omitted.
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub sample_id: String,
    /// Decoder layer to record; the last when omitted.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Cap on generated tokens; the model's max_len when omitted.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn error_line(command: &str, message: &str) -> String {
    serde_json::json!({ "status": "error", "command": command, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    let (name, result) = match &cli.command {
        Command::Synth(a) => ("synth", commands::synth(a)),
        Command::Tokenize(a) => ("tokenize", commands::tokenize(a)),
        Command::Train(a) => ("train", commands::train(a)),
        Command::Generate(a) => ("generate", commands::generate(a)),
        Command::Evaluate(a) => ("evaluate", commands::evaluate(a)),
        Command::Attention(a) => ("attention", commands::attention(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = String::new();
            for cause in e.chain() {
                let text = cause.to_string().replace('\n', " ");
                if !message.contains(&text) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&text);
                }
            }
            eprintln!("{}", error_line(name, &message));
            ExitCode::FAILURE
        }
    }
}
