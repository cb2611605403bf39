//! Shared setup for the tier benchmarks.

use std::path::PathBuf;

use stitchvm::harness::{load_suite, Subject};

/// The in-repo benchmark programs.
pub fn suite_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../programs")
}

pub fn suite() -> Vec<Subject> {
    load_suite(&suite_dir()).expect("bundled suite loads")
}
