//! Experiment plumbing for the `wecon` binary: datasets, training runs,
//! evaluation reports and exact-oracle comparisons.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};

pub use commands::{EvalArgs, GenDataArgs, HvArgs, OracleArgs, TrainArgs};
pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "wecon", version, about = "Weight-conditioned multi-objective solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a random instance file.
    GenData(GenDataArgs),
    /// Train a model with preference optimization.
    Train(TrainArgs),
    /// Evaluate a checkpoint over the weight lattice.
    Eval(EvalArgs),
    /// Exact Pareto fronts of tiny instances.
    Oracle(OracleArgs),
    /// Hypervolume of a point file.
    Hv(HvArgs),
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a).map(drop),
        Command::Train(a) => commands::train(&a).map(drop),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::Oracle(a) => commands::oracle(&a).map(drop),
        Command::Hv(a) => commands::hv(&a).map(drop),
    }
}
