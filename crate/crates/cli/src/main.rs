use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifact;
mod commands;

use artifact::Ctx;
use commands::{analysis, pipeline, serve, simulate};

/// Shallow pools, preference judgments and tournament qrels.
#[derive(Debug, Parser)]
#[command(name = "prefqrels", version)]
struct Cli {
    /// Worker threads for per-query parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Fixed Unix time for every timestamp written by this invocation.
    #[arg(long, global = true)]
    epoch: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build per-query pools from run tops and incumbent qrels.
    Pool(pipeline::PoolArgs),
    /// Sample queries from pools.
    Sample(pipeline::SampleArgs),
    /// Enumerate the pairs to judge.
    Pairs(pipeline::PairsArgs),
    /// Batch pairs into tasks with QC pairs.
    Tasks(pipeline::TasksArgs),
    /// Run the judging service.
    Serve(serve::ServeArgs),
    /// Validate exported answers and commit accepted tasks to the log.
    Ingest(pipeline::IngestArgs),
    /// Turn logged judgments into preference qrels.
    Aggregate(pipeline::AggregateArgs),
    /// MRR@k leaderboard with bootstrap intervals.
    Eval(analysis::EvalArgs),
    /// Pairwise win matrix of run tops.
    Winmatrix(analysis::WinMatrixArgs),
    /// Kendall tau between two score files.
    Compare(analysis::CompareArgs),
    /// Generate a synthetic campaign and judge it with simulated assessors.
    Simulate(simulate::SimulateArgs),
    /// Update best-known answers from a new run's tops.
    Challenge(pipeline::ChallengeArgs),
    /// Full comparison report for a set of runs.
    Report(analysis::ReportArgs),
    /// De-identified judgment log and decided pairs for release.
    Export(pipeline::ExportArgs),
}

/// Command line as recorded in provenance. The thread count does not change
/// any output, so it is left out.
fn recorded_command(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = vec![artifact::TOOL.to_string()];
    let mut args = args.peekable();
    while let Some(arg) = args.next() {
        if arg == "--jobs" {
            args.next();
        } else if !arg.starts_with("--jobs=") {
            out.push(arg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    let command = recorded_command(std::env::args().skip(1));
    let ctx = Ctx {
        command,
        epoch: cli.epoch,
    };
    let result = match cli.command {
        Command::Pool(a) => pipeline::pool(&ctx, a),
        Command::Sample(a) => pipeline::sample(&ctx, a),
        Command::Pairs(a) => pipeline::pairs(&ctx, a),
        Command::Tasks(a) => pipeline::tasks(&ctx, a),
        Command::Serve(a) => serve::serve(&ctx, a),
        Command::Ingest(a) => pipeline::ingest(&ctx, a),
        Command::Aggregate(a) => pipeline::aggregate(&ctx, a),
        Command::Eval(a) => analysis::eval(&ctx, a),
        Command::Winmatrix(a) => analysis::winmatrix(&ctx, a),
        Command::Compare(a) => analysis::compare(&ctx, a),
        Command::Simulate(a) => simulate::simulate(&ctx, a),
        Command::Challenge(a) => pipeline::challenge(&ctx, a),
        Command::Report(a) => analysis::report(&ctx, a),
        Command::Export(a) => pipeline::export(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
