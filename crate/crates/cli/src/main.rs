//! `survclust` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or flags,
//! 3 infeasible request (for example more clusters than the tree allows).

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use survclust::Error;

#[derive(Parser)]
#[command(name = "survclust", version, about = "Survival-supervised clustering of censored lifetimes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted survival groups.
    Simulate(SimulateArgs),
    /// Grow the survival tree, cluster its leaves and write the model.
    Fit(FitArgs),
    /// Log-rank test, hazard ratio and classification task for a model.
    Evaluate(EvaluateArgs),
    /// Assign cluster labels to new subjects.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated group weights summing to 1 (default: equal).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Comma-separated hazard rates (default: 0.4^g for group g).
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    #[arg(long, default_value_t = 20)]
    pub noise: usize,
    #[arg(long, default_value_t = 5.0)]
    pub entry_window: f64,
    #[arg(long, default_value_t = 7.0)]
    pub study_duration: f64,
    /// Output directory for subjects.csv, schema.json and truth.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Where subjects come from: a subject CSV, or activity and profile logs.
#[derive(Args)]
pub struct DataArgs {
    /// Subject CSV (id, time, event, feature columns).
    #[arg(long, conflicts_with_all = ["activity", "profiles"])]
    pub data: Option<PathBuf>,
    /// Feature schema JSON. With --profiles it describes the profile columns.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Activity CSV (user_id, timestamp, direction, partner_id).
    #[arg(long, requires_all = ["profiles", "cutoff", "window"])]
    pub activity: Option<PathBuf>,
    /// Profile CSV (user_id, join_time, profile feature columns).
    #[arg(long, requires = "activity")]
    pub profiles: Option<PathBuf>,
    /// Inactivity period after which a user counts as gone.
    #[arg(long)]
    pub cutoff: Option<f64>,
    /// Length of the early-activity feature window.
    #[arg(long)]
    pub window: Option<f64>,
    /// End of observation (default: latest join or activity time).
    #[arg(long, requires = "activity")]
    pub study_end: Option<f64>,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Number of clusters (default: as found by MCL).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    pub inflation: f64,
    #[arg(long, default_value_t = 50)]
    pub min_leaf_subjects: usize,
    #[arg(long, default_value_t = 5)]
    pub min_leaf_events: usize,
    #[arg(long, default_value_t = 12)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 32)]
    pub max_thresholds: usize,
    /// Model JSON output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub t0: f64,
    #[arg(long)]
    pub t1: f64,
    #[arg(long, default_value_t = 0.7)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON output path; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Feature CSV with an id column; time and event columns are ignored.
    #[arg(long)]
    pub data: PathBuf,
    /// Labels CSV output path (id, cluster).
    #[arg(long)]
    pub out: PathBuf,
    /// Route missing values and unknown levels to the larger training child
    /// instead of failing.
    #[arg(long)]
    pub unknown_as_majority_child: bool,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            e if e.is_io() => 1,
            Error::Json(j) if j.is_io() => 1,
            Error::UnreachableK { .. } | Error::NonConvergence { .. } => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SURVCLUST_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::usage(format!("SURVCLUST_THREADS: `{raw}` is not a non-negative integer")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::usage(format!("SURVCLUST_THREADS: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Predict(a) => commands::predict(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
