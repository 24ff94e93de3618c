//! `hazdml`: debiased hazard-ratio estimation from the command line.
//!
//! Every command is deterministic given its configuration and seeds:
//! running one twice produces byte-identical outputs. Exit codes follow
//! a fixed contract: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure.

mod artifacts;
mod cli;
mod commands;
mod config;
mod error;
mod reports;

use clap::error::ErrorKind;
use clap::Parser;
use cli::{Cli, Command};

/// Caps the worker-thread pool: the flag wins, then `HAZDML_THREADS`,
/// then one worker per core.
fn init_threads(flag: Option<usize>) -> Result<(), error::CliError> {
    let from_env = match std::env::var("HAZDML_THREADS") {
        Ok(s) => Some(s.parse::<usize>().map_err(|_| {
            error::CliError::Usage(format!("HAZDML_THREADS: cannot parse {s:?} as a thread count"))
        })?),
        Err(_) => None,
    };
    if let Some(n) = flag.or(from_env) {
        if n == 0 {
            return Err(error::CliError::Usage("thread count must be positive".into()));
        }
        // A second initialization can only happen in-process (tests);
        // the first pool then stays, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), error::CliError> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Simulate(args) => commands::cmd_simulate(args),
        Command::Fit(args) => commands::cmd_fit(args),
        Command::Evidence(args) => commands::cmd_evidence(args),
        Command::Audit(args) => commands::cmd_audit(args),
        Command::Nuisance(args) => commands::cmd_nuisance(args),
        Command::Debias(args) => commands::cmd_debias(args),
        Command::Pipeline(args) => commands::cmd_pipeline(args),
        Command::Experiment(args) => commands::cmd_experiment(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("hazdml: {e}");
        std::process::exit(e.exit_code());
    }
}
