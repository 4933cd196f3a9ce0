//! Building blocks for SLO-aware, fork-join sensing services.
//!
//! - [`dist`]: windowed empirical CDFs and product-CDF quantile inversion.
//! - [`budget`]: query-to-task and task-to-subtask tail-latency budgets, and
//!   the M/M/1 pod sizing estimator.
//! - [`registry`]: IAD/CSP registration and coverage discovery.
//! - [`control`]: service setup, negotiation and pod provisioning.
//! - [`dataplane`]: the two-tier query/task schedulers, per-node policy
//!   queues and fork-join accounting.

pub mod budget;
pub mod control;
pub mod dataplane;
pub mod dist;
pub mod registry;
pub mod units;

pub use units::{Micros, Percentile};
