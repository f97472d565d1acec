mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "rvae",
    version,
    about = "Relational variational autoencoders for wind farms and GP regression",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration; relative paths inside it resolve against its directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory receiving every output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Elbo,
    Nll,
    Mape,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a stored set of GP regression tasks.
    GenerateGp(Common),
    /// Simulate snapshots of a random wind-farm layout.
    GenerateFarm(Common),
    /// Train a model on a farm dataset or on a stream of GP tasks.
    Train(Common),
    /// Score a checkpoint on held-out graphs.
    Evaluate {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long, value_enum, default_value = "elbo")]
        mode: Mode,
    },
    /// Predict masked node states.
    Impute(WithCheckpoint),
    /// Absolute-gradient sensitivity of one masked node.
    Sensitivity(WithCheckpoint),
    /// Wind-direction polar deficits per turbine.
    WakePolar(WithCheckpoint),
    /// Deficit field behind a single turbine, sampled with a probe.
    ProbeGrid(WithCheckpoint),
}

/// Parses `argv` (program name first) and runs the command. Returns 2 on
/// usage errors, 1 on runtime errors (with a JSON object on stderr), 0 on
/// success.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "error": format!("{e:#}") }));
            1
        }
    }
}

fn main() {
    std::process::exit(cli_dispatch(std::env::args_os()));
}
