//! `streamcrf` command-line tool.
//!
//! Every subcommand writes its report to `--out` (stdout when absent) in the
//! requested format and exits 0 iff all of its checks pass. Check failures
//! exit 1 and errors exit 2; both print a failure JSON object on stderr.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use output::{emit, failure_json, Report};

fn run(cli: &Cli) -> anyhow::Result<Report> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::TrainDemo(a) => commands::train_demo(a),
        Command::AblateCentering(a) => commands::ablate_centering(a),
        Command::Bandwidth(a) => commands::bandwidth(a),
        Command::Decode(a) => commands::decode(a),
        Command::Selfcheck(a) => commands::selfcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = run(&cli).and_then(|report| {
        emit(&report, cli.format, cli.out.as_deref())?;
        Ok(report)
    });
    match result {
        Ok(report) if report.failures.is_empty() => ExitCode::SUCCESS,
        Ok(report) => {
            eprintln!("{}", failure_json(name, "check_failed", &report.failures));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", failure_json(name, "error", &[format!("{e:#}")]));
            ExitCode::from(2)
        }
    }
}
