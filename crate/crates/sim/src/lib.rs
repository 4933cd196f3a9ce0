//! Deterministic discrete-event simulator for the two-tier fork-join data
//! plane, with testbed and large-scale workload presets, a rate-search
//! driver and CSV reporting.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod verify;
pub mod workload;

pub use config::{large, testbed, SimConfig};
pub use engine::{run_simulation, RunOutcome, SimError, Simulation};
pub use metrics::LatencyRecorder;
pub use sweep::{max_sustainable_rate, SweepResult};
