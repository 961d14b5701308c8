//! Mock adapter for protocol tests: echoes `p=<value>` markers found in code.

use std::io::{self, BufReader};
use std::process::ExitCode;

use driftharness::backend::MockAdapter;
use driftharness::wire;

fn main() -> ExitCode {
    if !std::env::args().any(|a| a == "--serve") {
        eprintln!("usage: driftharness-mock-adapter --serve");
        return ExitCode::FAILURE;
    }
    let mut adapter = MockAdapter::default();
    match wire::serve(&mut adapter, BufReader::new(io::stdin().lock()), io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mock adapter: {e}");
            ExitCode::FAILURE
        }
    }
}
