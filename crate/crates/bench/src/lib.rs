//! Shared fixtures for the criterion benches.

use std::path::{Path, PathBuf};

use comuros_core::runtime::Scenario;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// A bundled scenario by file stem; panics if it is missing or malformed.
pub fn scenario(name: &str) -> Scenario {
    Scenario::load(&data_dir().join("scenarios").join(format!("{name}.json")))
        .unwrap_or_else(|e| panic!("scenario {name}: {e}"))
}
