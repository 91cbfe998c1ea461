//! `ecr` — train, evaluate, and probe container-repositioning policies.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ecr_core::Error;

#[derive(Parser)]
#[command(name = "ecr", version, about = "Empty-container repositioning: simulator, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run-config JSON file; defaults applied for every missing field.
    #[arg(long)]
    config: Option<std::path::PathBuf>,

    /// Single seed (overrides the config's seed list).
    #[arg(long)]
    seed: Option<u64>,

    /// Comma-separated or `a..b` range of seeds (overrides the config).
    #[arg(long)]
    seeds: Option<String>,

    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<std::path::PathBuf>,

    /// Episodes per training iteration (overrides the config).
    #[arg(long)]
    episodes: Option<usize>,

    /// Ablation switches; may be given multiple times.
    #[arg(long = "ablation", value_enum)]
    ablations: Vec<AblationName>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationName {
    NormalGc,
    SeparateActors,
    DecoderOnly,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    /// No repositioning: every decision is the no-op.
    None,
    Random,
    Heuristic,
    /// Greedy rollout of a trained checkpoint (requires --checkpoint).
    Learned,
}

#[derive(Subcommand)]
enum Command {
    /// Phase one only: train selfish local actor-critics.
    Pretrain(RunArgs),

    /// Full pipeline: pre-train, then fine-tune on the global reward.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Skip phase one and train directly on the global reward.
        #[arg(long)]
        skip_pretrain: bool,
    },

    /// Evaluate a policy over seeds with greedy rollouts.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        policy: PolicyName,
        /// Checkpoint file for the learned policy.
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
        /// Also write the first seed's event log as line-delimited records.
        #[arg(long)]
        export_events: bool,
    },

    /// Evaluate all built-in baselines side by side.
    Baseline(RunArgs),

    /// Merge two ports, reshuffle the trade matrix, and evaluate a trained
    /// checkpoint against no-repositioning on the derived topology.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        /// Ports to merge (defaults to the two busiest non-hub ports).
        #[arg(long)]
        merge: Option<String>,
        /// Seed for the trade-matrix reshuffle.
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
    },

    /// Project per-decision embeddings of a trained checkpoint to 2 principal
    /// components.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: std::path::PathBuf,
    },

    /// Learning-rate grid search; reports the best by mean fulfillment.
    Sweep(RunArgs),

    /// Validate a topology file.
    ValidateTopology {
        path: std::path::PathBuf,
    },

    /// Generate a synthetic topology file.
    GenerateTopology {
        #[arg(long, default_value_t = 6)]
        ports: u32,
        #[arg(long, default_value_t = 3)]
        routes: u32,
        #[arg(long, default_value_t = 6)]
        vessels: u32,
        #[arg(long, default_value_t = ecr_core::sim::topology::BUNDLED_SEED)]
        seed: u64,
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("REPO_LOG_LEVEL", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err.downcast_ref::<Error>().map_or(false, |e| {
                matches!(
                    e,
                    Error::Config(_) | Error::Topology(_) | Error::Parse(_)
                )
            });
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
