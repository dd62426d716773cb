//! `scone`: synthesize, preprocess, train, embed, cluster, evaluate and bench.
//!
//! Exit status is 0 on success, 2 on usage errors (bad flags, missing input
//! files) and 1 on runtime errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Subset-contrastive multi-view graph embedding.
#[derive(Parser, Debug)]
#[command(name = "scone", version)]
struct Cli {
    /// Threads for dense matrix products.
    #[arg(long, global = true, env = "SCONE_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view dataset with labels and survival times.
    Synth(SynthArgs),
    /// Apply ordered preprocessing steps to one view file.
    Preprocess(PreprocessArgs),
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Embed samples with a trained checkpoint.
    Embed(EmbedArgs),
    /// Louvain clustering of an embedding over a resolution sweep.
    Cluster(ClusterArgs),
    /// ARI, AMI and logrank metrics of a partition.
    Evaluate(EvaluateArgs),
    /// Peak memory and epoch time of subset-pair against full-graph epochs.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Key-value generator spec (n, clusters, views, view.NAME.dim, ...).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated steps applied in order: counts:TARGET, clr, zscore.
    #[arg(long, value_delimiter = ',', required = true)]
    pub steps: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// View file, optionally prefixed with its likelihood: `bernoulli:path`.
    #[arg(long = "view", required = true)]
    pub views: Vec<String>,
    /// Key-value training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint.json and train_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Subset size: a count, or a fraction in (0, 1).
    #[arg(long)]
    pub k_s: Option<String>,
    #[arg(long)]
    pub k_k: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
    /// Write checkpoint_EPOCH.json every this many epochs; 0 disables.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// View files, matched to the checkpoint's views by file stem.
    #[arg(long = "view", required = true)]
    pub views: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["best_modularity", "target_k"])))]
pub struct ClusterArgs {
    #[arg(long)]
    pub embedding: PathBuf,
    /// Keep the sweep partition with the highest modularity.
    #[arg(long)]
    pub best_modularity: bool,
    /// Keep the best sweep partition with exactly K communities.
    #[arg(long, value_name = "K")]
    pub target_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Neighbors per node in the embedding graph.
    #[arg(long, default_value_t = 15)]
    pub k_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub partition: PathBuf,
    /// Reference labels for ARI and AMI.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Survival table for a logrank test across the partition's clusters.
    #[arg(long)]
    pub survival: Option<PathBuf>,
    /// Metrics document (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Ascending sample sizes.
    #[arg(long = "n", value_delimiter = ',', default_values_t = [1000, 2000, 4000])]
    pub n_list: Vec<usize>,
    /// `half` or a fraction of n.
    #[arg(long, default_value = "half")]
    pub ks: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub latent: usize,
    #[arg(long, default_value_t = 15)]
    pub k_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub enum CliError {
    Usage(String),
    Runtime(scone::SconeError),
}

impl From<scone::SconeError> for CliError {
    fn from(e: scone::SconeError) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    std::env::set_var("MATMUL_NUM_THREADS", cli.threads.max(1).to_string());
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
