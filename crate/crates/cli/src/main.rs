//! `mdtd`: generate synthetic benchmarks, decompose, impute, estimate rank
//! and time the solver. Every command writes CSV metrics plus a
//! `manifest.json` into `--out`.

mod args;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use args::SolverArgs;

#[derive(Parser, Debug)]
#[command(name = "mdtd", version, about = "Multi-dictionary tensor decomposition")]
struct Cli {
    /// `key = value` file with flag defaults; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tensor with known dictionaries and codes.
    Gen(GenArgs),
    /// Decompose a tensor (optionally sweeping the sparsity weight).
    Decompose(DecomposeArgs),
    /// Fill in missing cells.
    Impute(ImputeArgs),
    /// Score a range of ranks by core consistency.
    Rank(RankArgs),
    /// Time the solver over a grid of tensor sizes.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// 200×300×400, rank 10, 50/30 graph atoms, max period 10.
    Full,
    /// 50×60×80, rank 5, 15/10 graph atoms, max period 5.
    Desk,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Override the preset dims: `I,J,T`.
    #[arg(long)]
    dims: Option<String>,
    /// GFT atoms for modes 1 and 2: `a1,a2`.
    #[arg(long)]
    atoms: Option<String>,
    #[arg(long)]
    max_period: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    /// Fraction of nonzero code entries per column.
    #[arg(long)]
    nonzero: Option<f64>,
    /// SNR in dB, or `none` for a noiseless tensor.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    communities: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of cells to list in `missing.txt` (0 writes no file).
    #[arg(long, default_value_t = 0.0)]
    mask_fraction: f64,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug, Serialize)]
struct InputArgs {
    /// Tensor file (`dims I J T` header, then `i j t value` lines).
    #[arg(long)]
    input: PathBuf,
    /// Keep the input in sparse storage.
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DecomposeArgs {
    #[command(flatten)]
    io: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma list of λ values applied to all modes; one CSV row each.
    #[arg(long)]
    sweep_lambda: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct ImputeArgs {
    #[command(flatten)]
    io: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Index file listing the missing cells.
    #[arg(long)]
    missing: PathBuf,
    /// `dense` or `sparse`.
    #[arg(long, default_value = "dense")]
    impute: String,
    /// Held-out values; enables MSE on the missing cells.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RankArgs {
    #[command(flatten)]
    io: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Candidate ranks: `a..b` or a comma list.
    #[arg(long, default_value = "1..10")]
    ranks: String,
    /// `threshold[:score]` or `argmax`.
    #[arg(long, default_value = "threshold:90")]
    rule: String,
    /// Optional index file of missing cells.
    #[arg(long)]
    missing: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Axis {
    /// Vary the temporal length T.
    T,
    /// Vary the mode-1 node count I.
    Nodes,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Axis::T)]
    axis: Axis,
    /// Sizes along the chosen axis, comma separated.
    #[arg(long)]
    grid: String,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Solver flags; the dictionaries always come from the generator.
    #[command(flatten)]
    solver: SolverArgs,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let argv = config::expand_args(std::env::args_os().collect())?;
    // repeated flags resolve to their last occurrence, so command-line
    // values override the injected config entries
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true));
    let cli = Cli::from_arg_matches(&cmd.get_matches_from(argv)).map_err(|e| e.exit()).unwrap();
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Decompose(a) => commands::decompose(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}
