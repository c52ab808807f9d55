// Shared by several test targets; each uses a different subset.
#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;

use edgecloud::scenario::{load_scenario, run_scenario, Loaded, RunOutput};

pub const FIXTURES: [&str; 4] = ["roaming", "scaling", "partition", "steady"];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"))
}

pub fn fixture(name: &str) -> Loaded {
    load_scenario(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn run_fixture(name: &str) -> RunOutput {
    run_scenario(&fixture(name), None)
}
