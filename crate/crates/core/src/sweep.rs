//! Batches of independent runs. Each run owns its whole world, so batches
//! split across threads with no shared state. With the `parallel` feature
//! off, [`run`] falls back to a plain loop; results are identical either way.

use crate::generate;
use crate::scenario::{run_scenario, validate, Loaded, ScenarioError};
use crate::report::Summary;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub trace_hash: String,
    pub trace_len: usize,
    pub summary: Summary,
}

fn one(loaded: &Loaded, seed: u64) -> RunSummary {
    let out = run_scenario(&loaded.clone().with_seed(seed), None);
    RunSummary {
        seed,
        trace_hash: out.trace.hash(),
        trace_len: out.trace.len(),
        summary: out.report.summary,
    }
}

pub fn seeds_sequential(loaded: &Loaded, seeds: &[u64]) -> Vec<RunSummary> {
    seeds.iter().map(|&s| one(loaded, s)).collect()
}

#[cfg(feature = "parallel")]
pub fn seeds_parallel(loaded: &Loaded, seeds: &[u64]) -> Vec<RunSummary> {
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| one(loaded, s)).collect()
}

/// Runs `loaded` once per seed, in seed order.
pub fn seeds(loaded: &Loaded, seeds: &[u64]) -> Vec<RunSummary> {
    #[cfg(feature = "parallel")]
    return seeds_parallel(loaded, seeds);
    #[cfg(not(feature = "parallel"))]
    return seeds_sequential(loaded, seeds);
}

fn generated(seed: u64) -> Result<RunSummary, ScenarioError> {
    let loaded = validate(generate::scenario(seed))?;
    Ok(one(&loaded, seed))
}

/// Generates and runs one random scenario per seed.
pub fn generated_sequential(seeds: &[u64]) -> Result<Vec<RunSummary>, ScenarioError> {
    seeds.iter().map(|&s| generated(s)).collect()
}

#[cfg(feature = "parallel")]
pub fn generated_parallel(seeds: &[u64]) -> Result<Vec<RunSummary>, ScenarioError> {
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| generated(s)).collect()
}

pub fn generated_runs(seeds: &[u64]) -> Result<Vec<RunSummary>, ScenarioError> {
    #[cfg(feature = "parallel")]
    return generated_parallel(seeds);
    #[cfg(not(feature = "parallel"))]
    return generated_sequential(seeds);
}
