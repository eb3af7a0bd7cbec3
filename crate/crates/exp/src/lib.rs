//! Declarative experiments on top of `npbml-core`: TOML configs, training
//! and evaluation runs over several seeds, ablation sweeps, and the oracle
//! check suite.

pub mod ablation;
pub mod config;
pub mod error;
pub mod records;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{Category, ExpError, Result};

use npbml_core::verify::{self, Check};

/// Runs every oracle check and fails if any of them does.
pub fn check(seed: u64, mut report: impl FnMut(&Check)) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, result) in verify::all_checks(seed) {
        let c = result.unwrap_or_else(|e| Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        });
        report(&c);
        out.push(c);
    }
    match out.iter().filter(|c| !c.passed).count() {
        0 => Ok(out),
        n => Err(ExpError::ChecksFailed(n)),
    }
}
