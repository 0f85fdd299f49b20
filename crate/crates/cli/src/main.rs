//! `cmfc`: run a scenario file or the acceptance suite.
//!
//! Exit codes: 0 ok, 2 parse/configuration error, 3 non-convergence,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmfc::acceptance::{run_suite_with, Suite};
use cmfc::output::write_json;
use cmfc::scenario::load;
use cmfc_cli::{exit_code, run_scenario, EXIT_NUMERICAL, EXIT_OK, EXIT_PARSE};

#[derive(Debug, Parser)]
#[command(name = "cmfc", version, about = "Constrained mean-field control solver")]
struct Cli {
    /// Scenario file (INI).
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Override a scenario key, e.g. `run.N=1000`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Progress and diagnostics on stderr.
    #[arg(long)]
    verbose: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the acceptance criteria (`fast` or `full`).
    Acceptance {
        /// Suite name.
        suite: String,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn acceptance(name: &str) -> i32 {
    let suite: Suite = match name.parse() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PARSE;
        }
    };
    let summary = run_suite_with(suite, |r| println!("{r}"));
    println!("{}/{} criteria passed", summary.passed, summary.total);
    if let Err(e) = write_json(&summary, std::io::stdout().lock()) {
        eprintln!("error: {e}");
        return EXIT_NUMERICAL;
    }
    if summary.all_pass {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    }
}

fn run(cli: &Cli) -> i32 {
    let Some(path) = &cli.scenario else {
        eprintln!("error: --scenario PATH is required (or use the `acceptance` subcommand)");
        return EXIT_PARSE;
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_PARSE;
        }
    };
    let scenario = match load(&text, &cli.set) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return exit_code(&e);
        }
    };
    match run_scenario(&scenario, &cli.out, cli.verbose) {
        Ok(report) => {
            let c = report.exit_code();
            if let Some(cost) = &report.cost {
                println!("cost {} ± {}", cost.value, cost.ci_halfwidth);
            }
            if let Some(conv) = &report.convergence {
                println!("converged {} after {} iterations", conv.converged, conv.iterations);
            }
            println!("report {}", cli.out.join("report.json").display());
            if c != EXIT_OK {
                eprintln!("error: run finished with exit code {c} (see report.json)");
            }
            c
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return code(EXIT_NUMERICAL);
    }
    match &cli.command {
        Some(Command::Acceptance { suite }) => code(acceptance(suite)),
        None => code(run(&cli)),
    }
}
