//! `qkd`: command-line harness for the fiber key-distribution simulator.
//!
//! Five subcommands cover the workflow: `model-sweep` prints closed-form
//! link-model curves as CSV, `simulate` runs one complete session with both
//! endpoints in-process (or over a loopback TCP socket), `serve`/`connect`
//! split the two endpoints across processes, and `analyze` prints the
//! closed-form security report for a configuration.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::CommonArgs;

#[derive(Parser)]
#[command(name = "qkd", version, about = "Fiber key-distribution simulator harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-form model curves over a span of fiber lengths, as CSV.
    ModelSweep(SweepArgs),
    /// One complete key exchange with both endpoints in this process.
    Simulate(CommonArgs),
    /// Initiator endpoint of a two-process session (binds and waits).
    Serve(CommonArgs),
    /// Responder endpoint of a two-process session (dials the initiator).
    Connect(CommonArgs),
    /// Closed-form security report for a configuration.
    Analyze(CommonArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Lengths to evaluate, as `start:stop:step` in km (inclusive).
    #[arg(long)]
    lengths: String,
    #[command(flatten)]
    common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::ModelSweep(a) => commands::model_sweep(&a.lengths, &a.common),
        Cmd::Simulate(a) => commands::simulate(a),
        Cmd::Serve(a) => commands::serve(a),
        Cmd::Connect(a) => commands::connect(a),
        Cmd::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
