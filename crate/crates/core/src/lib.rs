//! Deterministic simulator for a three-tier IoT platform: gateways at the
//! edge, edge modules next to them, and a central cloud.

pub mod catalog;
pub mod dataflow;
pub mod discovery;
pub mod generate;
pub mod ids;
pub mod kernel;
pub mod migration;
pub mod platform;
pub mod report;
pub mod scenario;
pub mod scheduler;
pub mod sweep;
pub mod topology;
pub mod trace;

/// Simulated time in milliseconds.
pub type SimTime = u64;
