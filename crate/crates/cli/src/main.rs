//! `fpnas`: validate, compile, cost, search, train and evaluate pyramid genomes.

mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Parser)]
#[command(name = "fpnas", version, about = "Feature pyramid architecture search toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GraphArgs {
    /// Number of chained pyramid copies.
    #[arg(long, default_value_t = 1)]
    pub stack: usize,
    /// Input image side in pixels.
    #[arg(long, default_value_t = 256)]
    pub image_side: usize,
    /// Override the genome's feature width.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize, serde::Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    Random,
    Evolution,
    Ppo,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize, serde::Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Proxy,
    Planted,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq, Debug)]
pub enum SamplerArg {
    Iid,
    Permutation,
}

#[derive(Args, Clone)]
pub struct TaskArgs {
    /// TaskConfig JSON; defaults to the search task retargeted to the genome's output levels.
    #[arg(long)]
    pub task_config: Option<PathBuf>,
    /// Override the training step budget.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long, value_enum)]
    pub driver: Driver,
    /// SpaceConfig JSON file, or `nasfpn` for the built-in 5-level space.
    #[arg(long)]
    pub space: String,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Target genome for the planted reward.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Number of successful evaluations.
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerArg::Iid)]
    pub sampler: SamplerArg,
    #[arg(long, default_value_t = 10)]
    pub population: usize,
    #[arg(long, default_value_t = 3)]
    pub tournament: usize,
    /// Controller samples per PPO update.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long)]
    pub ppo_lr: Option<f64>,
    /// Pyramid repeats in the proxy task.
    #[arg(long, default_value_t = 3)]
    pub stack: usize,
    #[command(flatten)]
    pub task_args: TaskArgs,
}

#[derive(Args)]
pub struct TrainArgs {
    pub genome: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub stack: usize,
    #[arg(long)]
    pub deep_supervision: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub task_args: TaskArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    /// Evaluate only exit `k` (1-based stage).
    #[arg(long)]
    pub early_exit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a genome file against the grammar.
    Validate {
        genome: PathBuf,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print or write a built-in genome.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lower a genome to a feature graph.
    Compile {
        genome: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// FLOPs and parameter counts.
    Cost {
        genome: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
        /// Second genome to compare against (defaults to the first).
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        compare_stack: Option<usize>,
        #[arg(long)]
        compare_image_side: Option<usize>,
        #[arg(long)]
        compare_dim: Option<usize>,
        /// Check the totals against instrumented execution counters.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Architecture search.
    Search(SearchArgs),
    /// Train a genome on the synthetic detection task.
    Train(TrainArgs),
    /// Evaluate a trained run, optionally at an early exit.
    Eval(EvalArgs),
    /// Re-execute a run from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { genome, out } => commands::validate(&genome, out.as_deref()),
        Command::Preset { name, out } => commands::preset(&name, out.as_deref()),
        Command::Compile { genome, graph, dot, json } => commands::compile(&genome, &graph, dot.as_deref(), json.as_deref()),
        Command::Cost { genome, graph, compare, compare_stack, compare_image_side, compare_dim, verify, out } => {
            let other = GraphArgs {
                stack: compare_stack.unwrap_or(graph.stack),
                image_side: compare_image_side.unwrap_or(graph.image_side),
                dim: compare_dim.or(graph.dim),
            };
            let wants_compare = compare.is_some() || compare_stack.is_some() || compare_image_side.is_some() || compare_dim.is_some();
            let compare = wants_compare.then(|| (compare.unwrap_or_else(|| genome.clone()), other));
            commands::cost(&genome, &graph, compare, verify, out.as_deref())
        }
        Command::Search(args) => commands::search(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Rerun { manifest, out } => commands::rerun(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit_code)
        }
    }
}
