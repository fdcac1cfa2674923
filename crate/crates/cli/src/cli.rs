use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "p2p", version, about = "Profile-to-adapter personalization experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Master seed; every other seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` settings file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Extra settings, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Leave wall-clock timings out of the outputs.
    #[arg(long, global = true)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Population in JSONL form.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Task descriptions (defaults to tasks.json beside the data).
    #[arg(long, value_name = "PATH")]
    pub tasks: Option<PathBuf>,
    /// Split produced by `p2p split`.
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory holding theta.p2phn, the embedder and base.p2plm.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    /// Base checkpoint, overriding the one in the model directory.
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population.
    Datagen {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        users_per_cluster: Option<usize>,
        #[arg(long)]
        history: Option<usize>,
        /// none, traits or opaque.
        #[arg(long)]
        style: Option<String>,
    },
    /// Split users into train and test sets.
    Split {
        #[command(flatten)]
        data: DataArgs,
        /// ood or random.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        n_test: Option<usize>,
        /// External embedding file keyed by profile hash.
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
    },
    /// Pretrain the base if needed, then train the hypernetwork.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Existing base checkpoint; built from scratch when absent.
        #[arg(long, value_name = "PATH")]
        base: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write one adapter file per user.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Users to generate for (default: the test split, else everyone).
        #[arg(long = "user")]
        users: Vec<String>,
    },
    /// Score a method on the test users.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "p2p")]
        baseline: String,
        /// Add per-user rows.
        #[arg(long)]
        per_user: bool,
    },
    /// Compare full profiles against a perturbed profile path.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        mode: String,
    },
    /// Retrain and evaluate along one axis.
    Sweep {
        /// clusters, users or retrieval_k.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        #[arg(long, value_name = "PATH")]
        base: Option<PathBuf>,
    },
    /// Time adapter generation against per-user fine-tuning.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        users: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Datagen { .. } => "datagen",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::Bench { .. } => "bench",
        }
    }
}
