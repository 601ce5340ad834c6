use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "tarmac", version, about = "Targeted multi-agent communication: train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy and write a self-describing run directory.
    Train(TrainArgs),
    /// Evaluate one or more run directories.
    Eval(EvalArgs),
    /// Post-hoc analyses of attention logs.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train a grid of message sizes × rounds and tabulate success.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CommArg {
    Targeted,
    Mean,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdvantageArg {
    Q,
    QMinusValue,
    TdError,
    Return,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RewardArg {
    Team,
    PerAgent,
}

/// Settings shared by `train` and `sweep`. Every flag overrides the value
/// from `--config` (or the defaults).
#[derive(Args, Debug, Clone, Default)]
pub struct RunFlags {
    /// shapes, traffic-easy, traffic-hard, prey-small, prey-medium, prey-large
    #[arg(long)]
    pub env: Option<String>,
    /// JSON run config to start from
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub comm: Option<CommArg>,
    #[arg(long)]
    pub gating: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<u64>,
    #[arg(long)]
    pub key_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub rollout_len: Option<usize>,
    #[arg(long, value_enum)]
    pub advantage: Option<AdvantageArg>,
    #[arg(long, value_enum)]
    pub reward_mode: Option<RewardArg>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Log attention for every k-th training episode
    #[arg(long)]
    pub attention_every: Option<u64>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub vision: Option<usize>,
    #[arg(long)]
    pub arrival_rate: Option<f64>,
    /// SHAPES: keep going after every agent reaches its goal
    #[arg(long)]
    pub run_to_horizon: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Message value width
    #[arg(long)]
    pub msg_dim: Option<usize>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Print a line per logged metrics row
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directories; several are aggregated as mean ± standard error
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub seed: u64,
    #[arg(long)]
    pub greedy: bool,
    /// JSON summary path (default: eval.json in the first run directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step trace JSONL (written by default when --episodes is 1)
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Attention log JSONL for every evaluated step
    #[arg(long)]
    pub attention: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Per-cell brake probability or received attention as a CSV grid.
    Spatial(SpatialArgs),
    /// Spearman correlation of alive cars vs attended cars per timestep.
    Correlation(CorrelationArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Brake,
    Attention,
}

#[derive(Args, Debug)]
pub struct SpatialArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Run directory whose environment fixes the grid size and brake action
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Restrict attention maps to one round
    #[arg(long)]
    pub round: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorrelationArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub shift: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 32, 64])]
    pub msg_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2])]
    pub rounds: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 200)]
    pub eval_episodes: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(AnalyzeCommand::Spatial(a)) => commands::spatial(&a),
        Command::Analyze(AnalyzeCommand::Correlation(a)) => commands::correlation(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
