//! Acceptance criteria: prints one pass/fail line per criterion and exits
//! non-zero if any fails. Runs without the libtest harness so the lines are
//! always shown.
//!
//! Runs the `fast` suite; set `CMFC_ACCEPTANCE_SUITE=full` for the
//! reference sizes.

use std::process::ExitCode;

use cmfc::acceptance::{run_suite_with, Suite};

fn main() -> ExitCode {
    let suite: Suite = match std::env::var("CMFC_ACCEPTANCE_SUITE") {
        Err(_) => Suite::Fast,
        Ok(s) => match s.parse() {
            Ok(s) => s,
            Err(e) => {
                eprintln!("CMFC_ACCEPTANCE_SUITE: {e}");
                return ExitCode::from(2);
            }
        },
    };
    println!("acceptance suite: {suite}");
    let summary = run_suite_with(suite, |r| println!("{r}"));
    println!("{}/{} criteria passed", summary.passed, summary.total);
    if summary.all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
