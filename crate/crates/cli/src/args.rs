use std::path::PathBuf;

use cag_core::calibration::FlipDirection;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cag",
    version,
    about = "Calibration-aware generation pipeline: score, label, project and evaluate reasoning traces"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the in-process mock backends driven by --fixtures.
    #[arg(long, global = true, conflicts_with = "replay")]
    pub mock: bool,
    /// Serve every backend call from a recorded cassette.
    #[arg(long, global = true, value_name = "CASSETTE")]
    pub replay: Option<PathBuf>,
    /// Record every backend call into a cassette (appends to an existing one).
    #[arg(
        long,
        global = true,
        value_name = "CASSETTE",
        conflicts_with = "replay"
    )]
    pub record: Option<PathBuf>,
    /// Directory holding chat_script.json, verdicts.json and corpus.json.
    #[arg(long, global = true, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for output artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter prompts with the fact-check and knowledge-requirement judges.
    Curate {
        /// JSONL of {id, text}.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Minimum factual score to keep a prompt.
        #[arg(long)]
        keep_threshold: Option<u8>,
    },
    /// Extract, verify and score the claims of every reasoning step.
    Score {
        /// JSONL of traces, either full records or {query, trace} with the
        /// tagged text form.
        #[arg(long)]
        traces: PathBuf,
        /// Evidence snippets retrieved per claim.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Turn step scores into reliability labels.
    Bucket(BucketArgs),
    /// Project each answer onto its reliable steps and check the result.
    Project {
        /// Labeled traces [default: OUT_DIR/labeled.jsonl].
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Emit training tuples from projected traces.
    Dataset {
        /// Projected traces [default: OUT_DIR/projected.jsonl].
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score responses with the claim-level precision/recall/F1 metric.
    Eval(EvalArgs),
    /// Attach group-normalized advantages to rollout groups.
    Rewards {
        /// JSONL of {prompt_id, rewards}.
        #[arg(long)]
        rollouts: PathBuf,
    },
    /// Check the thresholding regret bound by simulation.
    SimulateRegret {
        #[arg(long)]
        u1: Option<f64>,
        #[arg(long)]
        u2: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        /// Evaluate s = p ± epsilon on this many evenly spaced p instead of
        /// sampling.
        #[arg(long, value_name = "POINTS")]
        sweep: Option<usize>,
    },
    /// Calibration, intervention and efficiency analyses.
    #[command(subcommand)]
    Analyze(Analysis),
}

#[derive(Debug, Args)]
pub struct BucketArgs {
    /// Scored traces [default: OUT_DIR/scored.jsonl].
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Binary threshold: reliable iff score >= tau.
    #[arg(long, conflicts_with_all = ["thresholds", "grid"])]
    pub tau: Option<f64>,
    /// Ascending thresholds for a multi-level scheme.
    #[arg(
        long,
        value_delimiter = ',',
        requires = "labels",
        conflicts_with = "grid"
    )]
    pub thresholds: Option<Vec<f64>>,
    /// One label per bucket, lowest first (e.g. unreliable,unreliable,reliable).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Candidate thresholds; picks the one maximizing mean F1 of projected
    /// answers.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of {id, domain, system, response}.
    #[arg(long, conflicts_with = "traces")]
    pub responses: Option<PathBuf>,
    /// Projected traces; original and projected answers become two systems
    /// [default: OUT_DIR/projected.jsonl].
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Domain assigned to trace answers.
    #[arg(long, default_value = "default")]
    pub domain: String,
    /// Use this K everywhere instead of estimating it.
    #[arg(long, conflicts_with = "k_from")]
    pub k: Option<f64>,
    /// System whose responses define each domain's K, or `pooled`.
    #[arg(long)]
    pub k_from: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Rank AUC of predicted reliability against correctness.
    Auc {
        /// JSONL of {predicted, correct}.
        #[arg(long)]
        input: PathBuf,
    },
    /// Flip labels at random and re-project.
    Intervene {
        /// Labeled traces [default: OUT_DIR/labeled.jsonl].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Flip probability per eligible step.
        #[arg(long)]
        lambda: f64,
        /// unrel-to-rel or rel-to-unrel.
        #[arg(long)]
        direction: FlipDirection,
    },
    /// Relative change in decode length and time between two trace sets.
    Efficiency {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        treated: PathBuf,
    },
}
