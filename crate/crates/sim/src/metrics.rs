//! Post-warmup latency samples and percentile verdicts.

use std::collections::BTreeMap;

use sas_core::dataplane::{QueryResult, QueryStatus};
use sas_core::Micros;

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[i64], p: f64) -> Option<i64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(n) - 1])
}

/// Samples needed before the `p` percentile is more than the maximum.
pub fn min_samples(p: f64) -> usize {
    (100.0 / (100.0 - p)).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PercentileEstimate {
    pub value: Micros,
    pub samples: usize,
    /// Too few samples for this percentile to be meaningful.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupSamples {
    latencies: Vec<i64>,
    sorted: bool,
    pub subtasks: u64,
    pub deadline_misses: u64,
    pub failed: u64,
}

impl GroupSamples {
    pub fn count(&self) -> usize {
        self.latencies.len()
    }

    pub fn deadline_miss_fraction(&self) -> f64 {
        if self.subtasks == 0 {
            0.0
        } else {
            self.deadline_misses as f64 / self.subtasks as f64
        }
    }
}

/// Per-group latency samples from queries that arrived after warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRecorder {
    warmup: Micros,
    groups: BTreeMap<u16, GroupSamples>,
    pub pre_warmup: u64,
}

impl LatencyRecorder {
    pub fn new(warmup: Micros, groups: impl IntoIterator<Item = u16>) -> Self {
        LatencyRecorder {
            warmup,
            groups: groups.into_iter().map(|g| (g, GroupSamples::default())).collect(),
            pre_warmup: 0,
        }
    }

    /// Files a finished query under its class priority. Returns whether it
    /// counted.
    pub fn record(&mut self, r: &QueryResult) -> bool {
        if r.arrival < self.warmup {
            self.pre_warmup += 1;
            return false;
        }
        let g = self.groups.entry(r.class.priority).or_default();
        g.subtasks += r.task_fanouts.iter().map(|&k| k as u64).sum::<u64>();
        g.deadline_misses += r.deadline_misses as u64;
        match r.status {
            QueryStatus::Completed => {
                g.latencies.push(r.latency().as_us());
                g.sorted = false;
            }
            QueryStatus::Failed => g.failed += 1,
        }
        true
    }

    pub fn groups(&self) -> impl Iterator<Item = (u16, &GroupSamples)> {
        self.groups.iter().map(|(&g, s)| (g, s))
    }

    pub fn group(&self, g: u16) -> Option<&GroupSamples> {
        self.groups.get(&g)
    }

    pub fn completed(&self) -> usize {
        self.groups.values().map(|g| g.count()).sum()
    }

    /// Subtask deadline-miss fraction over every group.
    pub fn deadline_miss_fraction(&self) -> f64 {
        let (m, n) = self
            .groups
            .values()
            .fold((0, 0), |(m, n), g| (m + g.deadline_misses, n + g.subtasks));
        if n == 0 {
            0.0
        } else {
            m as f64 / n as f64
        }
    }

    pub fn percentile(&mut self, group: u16, p: f64) -> Option<PercentileEstimate> {
        let g = self.groups.get_mut(&group)?;
        if !g.sorted {
            g.latencies.sort_unstable();
            g.sorted = true;
        }
        let value = nearest_rank(&g.latencies, p)?;
        Some(PercentileEstimate {
            value: Micros(value),
            samples: g.count(),
            flagged: g.count() < min_samples(p),
        })
    }
}
