//! Simulation configuration and the two built-in scenarios.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// How many IADs (query tier) or edge nodes (task tier) a request fans out to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fanout {
    Fixed(u32),
    /// `N(mu, sigma^2)` rounded to the nearest integer, redrawn until it
    /// lands in `[min, max]`.
    Normal { mu: f64, sigma: f64, min: u32, max: u32 },
}

impl Fanout {
    fn validate(&self, limit: u32, what: &str) -> Result<(), ConfigError> {
        match *self {
            Fanout::Fixed(k) if k == 0 || k > limit => {
                invalid(format!("{what} fanout {k} outside [1, {limit}]"))
            }
            Fanout::Normal { min, max, .. } if min == 0 || max > limit || min > max => {
                invalid(format!("{what} fanout range [{min}, {max}] outside [1, {limit}]"))
            }
            Fanout::Normal { mu, sigma, .. } if !(sigma >= 0.0) || !mu.is_finite() => {
                invalid(format!("{what} fanout N({mu}, {sigma}^2) is not a distribution"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// IADs drawn by the placement rule.
    Uniform,
    /// Every task goes to this IAD (0-based index); query fanout must be 1.
    Hotspot(u32),
}

/// How fanout targets are chosen once their count is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Uniformly random subsets.
    #[default]
    Random,
    /// A contiguous block centred on the middle index.
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Reporting class and SPR priority level; smaller is more urgent.
    pub group: u16,
    pub share: f64,
    pub slo_ms: f64,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    pub query_fanout: Fanout,
    pub task_fanout: Fanout,
    #[serde(default = "default_routing")]
    pub routing: Routing,
}

fn default_percentile() -> f64 {
    99.0
}

fn default_routing() -> Routing {
    Routing::Uniform
}

/// Exponential means, milliseconds, for every delay segment except queueing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentModel {
    pub query_eval_ms: f64,
    pub task_eval_ms: f64,
    /// Dispatch plus return; each leg gets half.
    pub comm_ms: f64,
    pub exec_ms: f64,
    pub aggregation_ms: f64,
}

impl SegmentModel {
    /// Measured averages from the four-IAD testbed.
    pub const TESTBED: SegmentModel = SegmentModel {
        query_eval_ms: 2.57,
        task_eval_ms: 1.33,
        comm_ms: 2.87,
        exec_ms: 97.64,
        aggregation_ms: 0.31,
    };

    /// Mean subtask response time without queueing.
    pub fn unloaded_ms(&self) -> f64 {
        self.comm_ms + self.exec_ms
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let all = [
            self.query_eval_ms,
            self.task_eval_ms,
            self.comm_ms,
            self.exec_ms,
            self.aggregation_ms,
        ];
        if all.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return invalid("segment means must be finite and >= 0");
        }
        Ok(())
    }
}

impl Default for SegmentModel {
    fn default() -> Self {
        SegmentModel::TESTBED
    }
}

/// Requirement tuple offered to every IAD during service setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegotiationSpec {
    pub task_rate: f64,
    pub task_budget_ms: f64,
    pub percentile: f64,
}

impl Default for NegotiationSpec {
    fn default() -> Self {
        NegotiationSpec { task_rate: 1.0, task_budget_ms: 5_000.0, percentile: 99.0 }
    }
}

/// Rate-search driver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Post-warmup queries simulated per rate point.
    pub queries_per_point: u64,
    /// Warmup expressed in queries at the point's rate.
    pub warmup_queries: u64,
    pub min_rate: f64,
    pub max_rate: f64,
    pub grid_step: f64,
    pub resolution: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            queries_per_point: 50_000,
            warmup_queries: 2_000,
            min_rate: 0.5,
            max_rate: 500.0,
            grid_step: 0.5,
            resolution: 0.1,
        }
    }
}

impl SweepSpec {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.queries_per_point == 0 {
            return invalid("queries_per_point must be positive");
        }
        if !(self.min_rate > 0.0 && self.max_rate >= self.min_rate) {
            return invalid("sweep needs 0 < min_rate <= max_rate");
        }
        if !(self.grid_step > 0.0 && self.resolution > 0.0 && self.resolution <= self.grid_step) {
            return invalid("sweep needs 0 < resolution <= grid_step");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub iad_count: u32,
    pub nodes_per_iad: u32,
    #[serde(default = "one")]
    pub pods_per_node: u32,
    #[serde(default)]
    pub placement: Placement,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub segments: SegmentModel,
    /// Overall query arrival rate, queries per second, split evenly over
    /// the per-IAD query schedulers.
    pub rate: f64,
    pub duration_s: f64,
    pub warmup_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub negotiation: NegotiationSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn one() -> u32 {
    1
}

fn default_window() -> usize {
    sas_core::dist::DEFAULT_WINDOW
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Query schedulers, one per IAD.
    pub fn schedulers(&self) -> u32 {
        self.iad_count
    }

    /// Per-scheduler Poisson rate `gamma`.
    pub fn per_scheduler_rate(&self) -> f64 {
        self.rate / self.schedulers() as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iad_count == 0 || self.nodes_per_iad == 0 || self.pods_per_node == 0 {
            return invalid("iad_count, nodes_per_iad and pods_per_node must be positive");
        }
        if self.classes.is_empty() {
            return invalid("at least one class is required");
        }
        if self.classes.iter().any(|c| !(c.share >= 0.0)) {
            return invalid("class shares must be >= 0");
        }
        let total: f64 = self.classes.iter().map(|c| c.share).sum();
        if (total - 1.0).abs() > 1e-6 {
            return invalid(format!("class shares sum to {total}, not 1"));
        }
        for c in &self.classes {
            c.query_fanout.validate(self.iad_count, &format!("class {} query", c.name))?;
            c.task_fanout.validate(self.nodes_per_iad, &format!("class {} task", c.name))?;
            if !(c.slo_ms > 0.0) {
                return invalid(format!("class {} SLO must be positive", c.name));
            }
            if !(c.percentile > 0.0 && c.percentile < 100.0) {
                return invalid(format!("class {} percentile must be in (0, 100)", c.name));
            }
            if let Routing::Hotspot(i) = c.routing {
                if i >= self.iad_count {
                    return invalid(format!("class {} hotspot IAD {i} does not exist", c.name));
                }
                if c.query_fanout != Fanout::Fixed(1) {
                    return invalid(format!("class {} hotspot routing needs query fanout 1", c.name));
                }
            }
            let peers = self.classes.iter().filter(|o| o.group == c.group);
            if peers.clone().any(|o| o.slo_ms != c.slo_ms || o.percentile != c.percentile) {
                return invalid(format!("classes in group {} disagree on their SLO", c.group));
            }
        }
        self.segments.validate()?;
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return invalid("rate must be positive");
        }
        if !(self.warmup_s >= 0.0 && self.duration_s > self.warmup_s) {
            return invalid("need duration > warmup >= 0");
        }
        if self.window == 0 {
            return invalid("window must be positive");
        }
        self.sweep.validate()
    }

    /// Report groups with their SLO, in group order.
    pub fn groups(&self) -> Vec<(u16, f64, f64)> {
        let mut out: Vec<(u16, f64, f64)> = Vec::new();
        for c in &self.classes {
            if !out.iter().any(|g| g.0 == c.group) {
                out.push((c.group, c.slo_ms, c.percentile));
            }
        }
        out.sort_by_key(|g| g.0);
        out
    }

    /// Expected share of the query load carried by `iad` when each query's
    /// load is split evenly over the IADs it touches.
    pub fn load_share(&self, iad: u32) -> f64 {
        self.classes
            .iter()
            .map(|c| match c.routing {
                Routing::Hotspot(h) => c.share * (h == iad) as u32 as f64,
                // P(chosen) = k/N, each chosen IAD carries 1/k
                Routing::Uniform => c.share / self.iad_count as f64,
            })
            .sum()
    }

    /// Copy with the arrival rate set and the run length sized by the sweep
    /// settings.
    pub fn at_rate(&self, rate: f64) -> SimConfig {
        let mut c = self.clone();
        c.rate = rate;
        c.warmup_s = self.sweep.warmup_queries as f64 / rate;
        c.duration_s = c.warmup_s + self.sweep.queries_per_point as f64 / rate;
        c
    }
}

/// Four IADs of eight edge nodes with one hotspot IAD.
pub fn testbed() -> SimConfig {
    let class = |name: &str, group, share, slo_ms, kq, kt, routing| ClassSpec {
        name: name.into(),
        group,
        share,
        slo_ms,
        percentile: 99.0,
        query_fanout: Fanout::Fixed(kq),
        task_fanout: Fanout::Fixed(kt),
        routing,
    };
    SimConfig {
        iad_count: 4,
        nodes_per_iad: 8,
        pods_per_node: 1,
        placement: Placement::Random,
        classes: vec![
            class("1.1", 1, 0.1, 500.0, 1, 1, Routing::Uniform),
            class("1.2", 1, 0.4, 500.0, 1, 1, Routing::Hotspot(3)),
            class("2", 2, 0.4, 800.0, 4, 1, Routing::Uniform),
            class("3", 3, 0.1, 1_200.0, 4, 8, Routing::Uniform),
        ],
        segments: SegmentModel::TESTBED,
        rate: 4.0,
        duration_s: 12_000.0,
        warmup_s: 500.0,
        seed: 1,
        window: sas_core::dist::DEFAULT_WINDOW,
        negotiation: NegotiationSpec::default(),
        sweep: SweepSpec::default(),
    }
}

/// Four-class workload with normally distributed fanouts. The reference
/// fanout parameters describe a 60 x 300 deployment and are scaled to the
/// requested size.
pub fn large(iads: u32, nodes: u32) -> SimConfig {
    const REF_IADS: f64 = 60.0;
    const REF_NODES: f64 = 300.0;
    let si = iads as f64 / REF_IADS;
    let sn = nodes as f64 / REF_NODES;
    let class = |name: &str, group, share, slo_s: f64, (qm, qs): (f64, f64), (tm, ts): (f64, f64)| {
        ClassSpec {
            name: name.into(),
            group,
            share,
            slo_ms: slo_s * 1e3,
            percentile: 99.0,
            query_fanout: Fanout::Normal { mu: qm * si, sigma: qs * si, min: 1, max: iads },
            task_fanout: Fanout::Normal { mu: tm * sn, sigma: ts * sn, min: 1, max: nodes },
            routing: Routing::Uniform,
        }
    };
    SimConfig {
        iad_count: iads,
        nodes_per_iad: nodes,
        pods_per_node: 1,
        placement: Placement::Centered,
        classes: vec![
            class("1", 1, 0.1, 1.2, (100.0, 100.0), (100.0, 50.0)),
            class("2", 2, 0.4, 1.8, (300.0, 50.0), (300.0, 100.0)),
            class("3", 3, 0.3, 2.4, (500.0, 200.0), (500.0, 200.0)),
            class("4", 4, 0.2, 3.0, (700.0, 200.0), (700.0, 300.0)),
        ],
        segments: SegmentModel::TESTBED,
        rate: 1.0,
        duration_s: 2_000.0,
        warmup_s: 200.0,
        seed: 1,
        window: sas_core::dist::DEFAULT_WINDOW,
        negotiation: NegotiationSpec::default(),
        sweep: SweepSpec::default(),
    }
}
