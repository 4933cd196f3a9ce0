//! Rate points and the maximum-sustainable-rate search.

use sas_core::dataplane::QueuePolicy;

use crate::config::SimConfig;
use crate::engine::{RunOutcome, SimError, Simulation};

/// One class at one rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub policy: QueuePolicy,
    pub class: u16,
    pub rate: f64,
    pub p99_us: Option<i64>,
    pub slo_us: i64,
    pub met: bool,
    pub deadline_miss_frac: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub rate: f64,
    pub rows: Vec<ClassRow>,
    /// Every class met its SLO.
    pub met: bool,
    pub deadline_miss_frac: f64,
}

/// Per-class verdicts of a finished run. A class with too few samples for
/// its percentile counts as not met.
pub fn summarize(cfg: &SimConfig, out: &mut RunOutcome) -> RatePoint {
    let mut rows = Vec::new();
    for (group, slo_ms, p) in cfg.groups() {
        let est = out.recorder.percentile(group, p);
        let slo_us = sas_core::Micros::from_millis_f64(slo_ms).as_us();
        let g = out.recorder.group(group);
        rows.push(ClassRow {
            policy: out.policy,
            class: group,
            rate: out.rate,
            p99_us: est.map(|e| e.value.as_us()),
            slo_us,
            met: est.is_some_and(|e| !e.flagged && e.value.as_us() <= slo_us),
            deadline_miss_frac: g.map_or(0.0, |g| g.deadline_miss_fraction()),
            samples: g.map_or(0, |g| g.count()),
        });
    }
    RatePoint {
        rate: out.rate,
        met: rows.iter().all(|r| r.met),
        rows,
        deadline_miss_frac: out.recorder.deadline_miss_fraction(),
    }
}

/// Simulates `cfg` at `rate`, sized by its sweep settings.
pub fn evaluate(cfg: &SimConfig, policy: QueuePolicy, rate: f64) -> Result<RatePoint, SimError> {
    let at = cfg.at_rate(rate);
    let mut out = Simulation::new(&at, policy)?.run()?;
    let point = summarize(&at, &mut out);
    log::debug!(
        "{policy} rate={rate:.3} met={} p99={:?}",
        point.met,
        point.rows.iter().map(|r| r.p99_us).collect::<Vec<_>>()
    );
    Ok(point)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub policy: QueuePolicy,
    /// Largest rate found with every class within its SLO; 0 if none.
    pub max_rate: f64,
    /// Every evaluated point, ascending by rate.
    pub points: Vec<RatePoint>,
    pub diagnostic: Option<String>,
}

impl SweepResult {
    pub fn point_at(&self, rate: f64) -> Option<&RatePoint> {
        self.points.iter().find(|p| (p.rate - rate).abs() < 1e-9)
    }
}

struct Search<'a> {
    cfg: &'a SimConfig,
    policy: QueuePolicy,
    points: Vec<RatePoint>,
}

impl Search<'_> {
    fn meets(&mut self, rate: f64) -> Result<bool, SimError> {
        if let Some(p) = self.points.iter().find(|p| (p.rate - rate).abs() < 1e-9) {
            return Ok(p.met);
        }
        let p = evaluate(self.cfg, self.policy, rate)?;
        let met = p.met;
        self.points.push(p);
        Ok(met)
    }
}

/// Largest overall arrival rate at which every class meets its SLO.
///
/// Assumes latency grows with rate. Probes the `grid_step` grid upward by
/// doubling, binary-searches the grid between the last pass and the first
/// failure, then bisects that cell down to `resolution`.
pub fn max_sustainable_rate(cfg: &SimConfig, policy: QueuePolicy) -> Result<SweepResult, SimError> {
    cfg.validate()?;
    let sw = cfg.sweep;
    let grid = |i: u64| sw.min_rate + i as f64 * sw.grid_step;
    let last = ((sw.max_rate - sw.min_rate) / sw.grid_step + 1e-9).floor() as u64;
    let mut s = Search { cfg, policy, points: Vec::new() };

    let finish = |mut s: Search, max_rate: f64, diagnostic: Option<String>| {
        s.points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        if let Some(d) = &diagnostic {
            log::warn!("{policy}: {d}");
        }
        Ok(SweepResult { policy, max_rate, points: s.points, diagnostic })
    };

    if !s.meets(grid(0))? {
        let d = format!("SLO unmet even at the minimum rate {}", sw.min_rate);
        return finish(s, 0.0, Some(d));
    }
    let (mut lo, mut hi) = (0u64, None);
    let mut span = 1;
    while lo < last {
        let i = (lo + span).min(last);
        if s.meets(grid(i))? {
            lo = i;
            span *= 2;
        } else {
            hi = Some(i);
            break;
        }
    }
    let Some(mut hi) = hi else {
        let d = format!("SLOs still met at the maximum rate {}", grid(last));
        return finish(s, grid(last), Some(d));
    };
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if s.meets(grid(mid))? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (mut a, mut b) = (grid(lo), grid(hi));
    while b - a > sw.resolution + 1e-9 {
        let m = 0.5 * (a + b);
        if s.meets(m)? {
            a = m;
        } else {
            b = m;
        }
    }
    finish(s, a, None)
}

/// `(edfq - other) / other`, in percent.
pub fn gain_percent(edfq: f64, other: f64) -> f64 {
    if other == 0.0 {
        if edfq == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (edfq - other) / other * 100.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_examples() {
        assert!((gain_percent(17.98, 13.23) - 35.9).abs() < 0.05);
        assert!((gain_percent(17.98, 15.73) - 14.3).abs() < 0.05);
        assert_eq!(gain_percent(0.0, 0.0), 0.0);
        assert!(gain_percent(1.0, 0.0).is_infinite());
    }
}
