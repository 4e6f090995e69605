mod checks;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checks::Fault;

#[derive(Parser, Debug)]
#[command(name = "visgeo", version = manifest::VERSION, about = "Geometry-aware molecular transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; absent sections use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random component; overrides the config seed.
    #[arg(long, env = "RGC_ATTN_SEED")]
    pub seed: Option<u64>,
    /// Directory receiving reports and the run manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads for parallel checks; timings always run on one.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rigid-motion and permutation checks on XYZ conformers.
    CheckEquiv {
        #[command(flatten)]
        common: Common,
        /// XYZ conformer files.
        #[arg(required = true)]
        conformers: Vec<PathBuf>,
        /// Molecule JSONL supplying bond graphs for conformers with matching ids.
        #[arg(long)]
        molecules: Option<PathBuf>,
        /// Random rigid motions and permutations per conformer.
        #[arg(long)]
        n_trials: Option<usize>,
        /// Planted fault for exercising the failure path.
        #[arg(long, value_enum)]
        fault: Option<Fault>,
    },
    /// Fast angle/dihedral features against the enumeration oracles.
    OracleDiff {
        #[command(flatten)]
        common: Common,
        /// Comma-separated atom counts, each at most 16.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Runtime scaling of the fast path and the oracles.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated atom counts.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Timed repetitions per size; the median is reported.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Regression of mean pairwise distance on synthetic molecules.
    TrainToy {
        #[command(flatten)]
        common: Common,
    },
    /// Embedding alignment of a student to a frozen teacher on a noisy corpus.
    DistillToy {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; a seeded fresh encoder is used when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Trimmed-mean ensemble with small-molecule fallback routing.
    PredictEnsemble {
        #[command(flatten)]
        common: Common,
        /// Member predictions CSV: sample_id,member_id,value_ev.
        #[arg(long)]
        predictions: PathBuf,
        /// Fallback table CSV: sample_id,value_ev.
        #[arg(long)]
        fallback: PathBuf,
        /// Molecule JSONL; one output row per molecule, in file order.
        #[arg(long)]
        molecules: PathBuf,
        /// Number of middle values averaged.
        #[arg(long)]
        k: Option<usize>,
        /// Molecules with fewer atoms go to the fallback.
        #[arg(long)]
        threshold: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::CheckEquiv {
            common,
            conformers,
            molecules,
            n_trials,
            fault,
        } => commands::check_equiv(&common, &conformers, molecules.as_deref(), n_trials, fault),
        Command::OracleDiff { common, sizes } => commands::oracle_diff(&common, sizes),
        Command::Bench { common, sizes, repeats } => commands::bench(&common, sizes, repeats),
        Command::TrainToy { common } => commands::train_toy(&common),
        Command::DistillToy { common, teacher } => commands::distill_toy(&common, teacher.as_deref()),
        Command::PredictEnsemble {
            common,
            predictions,
            fallback,
            molecules,
            k,
            threshold,
        } => commands::predict_ensemble(&common, &predictions, &fallback, &molecules, k, threshold),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
