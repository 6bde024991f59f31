//! `stagelora`: plan, train, schedule and optimize staged adapter runs.
//!
//! Every flag can also be set through a `STAGELORA_*` environment variable.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "stagelora",
    version,
    about = "Staged low-rank adapter planning and pipeline scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a task graph and print its layers.
    Validate(GraphArgs),
    /// Print the stage plan for a graph.
    Plan(PlanArgs),
    /// Run the toy trainer over every stage and audit immutability.
    Train(TrainArgs),
    /// Print the cycle-ordered event list for a fixed grouping and partition.
    Schedule(ScheduleArgs),
    /// Simulate a fixed grouping and partition.
    Simulate(ScheduleArgs),
    /// Search grouping, partition and batch size.
    Optimize(OptimizeArgs),
    /// Summarize the outputs of earlier `train` or `optimize` runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GraphArgs {
    /// Task graph JSON: `{"tasks": [...], "edges": [["A","C"], ...]}`.
    #[arg(long, env = "STAGELORA_GRAPH")]
    graph: PathBuf,
}

/// Fraction of each prerequisite block left frozen; `--frozen-ratio r` is
/// `--delta 1-r`.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct DeltaArgs {
    #[arg(long, env = "STAGELORA_FROZEN_RATIO")]
    frozen_ratio: Option<f64>,
    /// Activated fraction of each prerequisite block.
    #[arg(long, env = "STAGELORA_DELTA")]
    delta: Option<f64>,
}

#[derive(Debug, Args)]
struct LayoutArgs {
    #[arg(long, env = "STAGELORA_D_OUT", default_value_t = 4)]
    d_out: usize,
    /// Defaults to 4 columns per task.
    #[arg(long, env = "STAGELORA_D_IN")]
    d_in: Option<usize>,
    #[arg(long, env = "STAGELORA_RANK", default_value_t = 4)]
    rank: usize,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    delta: DeltaArgs,
    #[command(flatten)]
    layout: LayoutArgs,
    /// Print the plan as JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Also write `plan.json` here.
    #[arg(long, env = "STAGELORA_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    delta: DeltaArgs,
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long, env = "STAGELORA_SEED")]
    seed: u64,
    #[arg(long, env = "STAGELORA_LR", default_value_t = 0.05)]
    lr: f64,
    /// Gradient steps per stage.
    #[arg(long, env = "STAGELORA_STEPS", default_value_t = 100)]
    steps: usize,
    /// Samples per task.
    #[arg(long, env = "STAGELORA_SAMPLES", default_value_t = 32)]
    samples: usize,
    #[arg(long, env = "STAGELORA_NOISE", default_value_t = 0.01)]
    noise: f64,
    #[arg(long, env = "STAGELORA_OUT")]
    out: PathBuf,
    /// Debug: unmask a masked block in the last stage before training.
    #[arg(long, hide = true)]
    corrupt_plan: bool,
}

#[derive(Debug, Args)]
struct WorkloadArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Cost profile JSON with `devices`, `layers` and `tasks`.
    #[arg(long, env = "STAGELORA_COSTS")]
    costs: PathBuf,
    #[command(flatten)]
    delta: DeltaArgs,
    #[command(flatten)]
    layout: LayoutArgs,
    /// Trainee of the stage to schedule; defaults to the last stage.
    #[arg(long, env = "STAGELORA_STAGE")]
    stage: Option<String>,
    /// Number of samples per epoch.
    #[arg(long, env = "STAGELORA_DATASET_SIZE", default_value_t = 64)]
    dataset_size: usize,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Training-group devices in pipeline order; the rest form the frozen group.
    #[arg(
        long,
        env = "STAGELORA_TRAIN_DEVICES",
        value_delimiter = ',',
        required = true
    )]
    train_devices: Vec<String>,
    /// Frozen tasks executed on the training group.
    #[arg(long, env = "STAGELORA_OFFLOAD", value_delimiter = ',')]
    offload: Vec<String>,
    /// Layers per device: training group first, then the frozen group.
    #[arg(long, env = "STAGELORA_SPLIT", value_delimiter = ',', required = true)]
    split: Vec<usize>,
    /// Micro-batch size.
    #[arg(long, env = "STAGELORA_K", default_value_t = 1)]
    k: usize,
    #[arg(long, env = "STAGELORA_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, env = "STAGELORA_K_MAX", default_value_t = 8)]
    k_max: usize,
    #[arg(long, env = "STAGELORA_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of an earlier run.
    #[arg(long, env = "STAGELORA_OUT")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(a) => commands::validate(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Train(a) => commands::train(&a),
        Command::Schedule(a) => commands::schedule(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(violations) => {
            eprintln!("{violations} invariant violation(s)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
