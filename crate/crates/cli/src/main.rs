//! `gridvec`: vocabulary, preprocessing, sharded training, export,
//! evaluation and bandwidth reporting.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gridvec", version, about = "Column-sharded word2vec training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count words in a one-sentence-per-line text corpus.
    Vocab(VocabArgs),
    /// Map a text corpus to vocabulary indices.
    Preprocess(PreprocessArgs),
    /// Train in-process (local-sim), serve one shard, or drive remote shards.
    Train(Box<TrainArgs>),
    /// Fetch trained vectors from running shards.
    Export(ExportArgs),
    /// Similarity, analogy and neighbor evaluation of a vector file.
    Eval(EvalArgs),
    /// Predicted and measured network traffic.
    Bandwidth(BandwidthArgs),
}

#[derive(Args)]
pub struct VocabArgs {
    /// Flat key = value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub min_count: Option<u64>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Vocabulary file to write (word<TAB>count, most frequent first).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Indexed corpus file to write.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reuse the settings of an earlier run; flags still override.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// local-sim, shard or client.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Indexed corpus from `gridvec preprocess`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vector file written after training (word2vec text format).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Run manifest path; defaults to OUTPUT.manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub window: Option<u32>,
    #[arg(long)]
    pub negatives: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub alpha_min: Option<f64>,
    #[arg(long)]
    pub min_count: Option<u64>,
    #[arg(long)]
    pub subsample: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Sample each window size uniformly from 1..=window.
    #[arg(long)]
    pub dynamic_window: Option<bool>,
    /// Interleave sentence positions within a minibatch.
    #[arg(long)]
    pub interleaved: Option<bool>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Shard endpoints, one host:port per line in shard order.
    #[arg(long)]
    pub endpoints_file: Option<PathBuf>,
    /// Shard mode: address to listen on.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub shard_id: Option<usize>,
    /// Shard mode: worker threads, 0 for one per core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Client mode: stop every shard after training.
    #[arg(long)]
    pub shutdown_shards: bool,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub endpoints_file: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Stop every shard after exporting.
    #[arg(long)]
    pub shutdown_shards: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Vector file in word2vec text format.
    #[arg(long)]
    pub vectors: PathBuf,
    /// Word-pair similarity judgments (word, word, score).
    #[arg(long)]
    pub wordsim: Option<PathBuf>,
    /// Analogy questions, four words per line; `:` lines are section headers.
    #[arg(long)]
    pub analogies: Option<PathBuf>,
    /// Lowercase the evaluation files before lookup.
    #[arg(long)]
    pub lowercase: bool,
    /// Print nearest neighbors of these words.
    #[arg(long = "neighbors", value_delimiter = ',')]
    pub neighbors: Vec<String>,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Second vector file for cosine agreement.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args)]
pub struct BandwidthArgs {
    /// Bytes per word for a conventional parameter server: 2 w (n+1) d 4.
    #[arg(long)]
    pub conventional: bool,
    /// Upper bound on F/G bytes per word: w (n+1) S 4.
    #[arg(long)]
    pub proposed: bool,
    /// Proposed over conventional, exact and first-order.
    #[arg(long)]
    pub ratio: bool,
    /// Context words per input word.
    #[arg(short = 'w', long)]
    pub contexts: Option<f64>,
    #[arg(short = 'n', long)]
    pub negatives: Option<f64>,
    #[arg(short = 'd', long)]
    pub dim: Option<f64>,
    #[arg(short = 'S', long)]
    pub shards: Option<f64>,
    /// Compare a run's measured traffic with the model.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Vocab(a) => commands::vocab(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Export(a) => commands::export(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bandwidth(a) => commands::bandwidth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
