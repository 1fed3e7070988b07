//! The `verify` command: oracle and property suites with measured errors.

use std::fmt::Write as _;

use pppc_core::verify::{run_all, Check};

use crate::error::CliResult;

pub const DEFAULT_SEED: u64 = 0;

pub fn cmd_verify(seed: u64) -> CliResult<Vec<Check>> {
    Ok(run_all(seed)?)
}

/// One `PASS`/`FAIL` line per check.
pub fn report(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(s, "{} checks, {failed} failed", checks.len());
    s
}
