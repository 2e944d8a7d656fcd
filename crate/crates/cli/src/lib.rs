//! Command-line workflow and streaming service.

pub mod commands;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "jenkins", version, about = "Synthetic neural encode/decode loop")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic center-out dataset.
    GenData(GenDataArgs),
    /// Train the spike → velocity decoder.
    TrainDecoder(TrainArgs),
    /// Train the velocity → spike encoder.
    TrainEncoder(TrainArgs),
    /// Score trained models on the test split.
    Eval(EvalArgs),
    /// Run the full loop over a leader trace.
    Simulate(SimulateArgs),
    /// Serve live sessions over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to 30 for the decoder and 60 for the encoder.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Chain description file; the built-in desk arm when absent.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = jenkins_core::kinematics::DEFAULT_LAMBDA)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub leader: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Loop output in the dataset format; the trajectory goes next to it.
    #[arg(long, default_value = "simulate.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
