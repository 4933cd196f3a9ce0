//! Randomized invariant checks shared by the `--verify` CLI mode and the
//! test suites. Each check draws one random case from `rng` and returns a
//! description of the first violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sas_core::budget::{task_percentile, QuerySlo, SubtaskBudget};
use sas_core::dataplane::{
    IadSlot, PolicyQueue, QueryClass, QueryId, QueuePolicy, Subtask, SubtaskId, SubtaskWork, TaskId,
};
use sas_core::Micros;

use crate::config::{ClassSpec, Fanout, NegotiationSpec, Placement, Routing, SegmentModel, SimConfig, SweepSpec};
use crate::engine::Simulation;

pub type Check = fn(&mut ChaCha8Rng) -> Result<(), String>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: u32,
    pub failure: Option<String>,
}

/// Runs `check` on `cases` independent random cases, stopping at the first
/// failure.
pub fn run_cases(name: &'static str, check: Check, cases: u32, seed: u64) -> CheckReport {
    for i in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if let Err(e) = check(&mut rng) {
            return CheckReport { name, cases: i + 1, failure: Some(format!("case {i}: {e}")) };
        }
    }
    CheckReport { name, cases, failure: None }
}

fn subtask(id: u64, deadline: i64, priority: u16) -> Subtask {
    Subtask {
        id: SubtaskId(id),
        task: TaskId(id),
        query: QueryId(id),
        iad: IadSlot(0),
        node: 0,
        class: QueryClass { id: priority, priority },
        budget: SubtaskBudget {
            enqueued_at: Micros::ZERO,
            queuing_budget: Micros(deadline),
            deadline: Micros(deadline),
            infeasible: false,
        },
        work: SubtaskWork::default(),
        dequeued_at: None,
        missed_deadline: false,
    }
}

/// Random push/pop trace against a linear-scan minimum over
/// `(deadline, arrival)`.
pub fn edfq_order(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut q = PolicyQueue::new(QueuePolicy::Edfq);
    let mut oracle: Vec<(i64, u64)> = Vec::new();
    let ops = rng.random_range(1..300);
    let mut next = 0;
    for _ in 0..ops {
        if rng.random_bool(0.6) {
            next += 1;
            let d = rng.random_range(0..40);
            q.push(subtask(next, d, rng.random_range(1..4)));
            oracle.push((d, next));
        } else {
            let want = oracle
                .iter()
                .enumerate()
                .min_by_key(|(_, &e)| e)
                .map(|(i, _)| i)
                .map(|i| oracle.remove(i).1);
            let got = q.pop().map(|s| s.id.0);
            if got != want {
                return Err(format!("dequeued {got:?}, oracle says {want:?}"));
            }
        }
    }
    Ok(())
}

/// `p_t` never loosens as the query fanout grows.
pub fn monotone_task_percentile(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let p = rng.random_range(50.0..99.999);
    let k = rng.random_range(1..10_000);
    let slo = QuerySlo::new(p, Micros::from_millis(500)).map_err(|e| e.to_string())?;
    let a = task_percentile(slo, k).map_err(|e| e.to_string())?.percentile.value();
    let b = task_percentile(slo, k + 1).map_err(|e| e.to_string())?.percentile.value();
    if a < p || b < a || b >= 100.0 {
        return Err(format!("p_q={p} k={k}: {a} then {b}"));
    }
    Ok(())
}

/// A small random deployment for the engine-level checks.
pub fn small_config(rng: &mut ChaCha8Rng, mean_subtasks_per_node_s: f64) -> SimConfig {
    let iads = rng.random_range(1..=3);
    let nodes = rng.random_range(1..=4);
    let exec_ms = rng.random_range(5.0..50.0);
    let kq = rng.random_range(1..=iads);
    let kt = rng.random_range(1..=nodes);
    // per-node subtask rate = rate * kq * kt / (iads * nodes)
    let rate = mean_subtasks_per_node_s * (iads * nodes) as f64 / (kq * kt) as f64;
    SimConfig {
        iad_count: iads,
        nodes_per_iad: nodes,
        pods_per_node: rng.random_range(1..=2),
        placement: if rng.random_bool(0.5) { Placement::Random } else { Placement::Centered },
        classes: vec![
            ClassSpec {
                name: "a".into(),
                group: 1,
                share: 0.5,
                slo_ms: 300.0,
                percentile: 99.0,
                query_fanout: Fanout::Fixed(kq),
                task_fanout: Fanout::Fixed(kt),
                routing: Routing::Uniform,
            },
            ClassSpec {
                name: "b".into(),
                group: 2,
                share: 0.5,
                slo_ms: 900.0,
                percentile: 99.0,
                query_fanout: Fanout::Fixed(kq),
                task_fanout: Fanout::Fixed(kt),
                routing: Routing::Uniform,
            },
        ],
        segments: SegmentModel {
            query_eval_ms: 1.0,
            task_eval_ms: 1.0,
            comm_ms: rng.random_range(0.0..4.0),
            exec_ms,
            aggregation_ms: 0.5,
        },
        rate,
        duration_s: 0.0,
        warmup_s: 0.0,
        seed: rng.random(),
        window: 1_000,
        negotiation: NegotiationSpec::default(),
        sweep: SweepSpec::default(),
    }
}

fn any_policy(rng: &mut ChaCha8Rng) -> QueuePolicy {
    QueuePolicy::ALL[rng.random_range(0..3)]
}

/// Steps a short run, checking fork-join conservation and work
/// conservation after every event, and that every query closes.
pub fn fork_join_conservation(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut cfg = small_config(rng, 8.0);
    cfg.duration_s = 200.0 / cfg.rate;
    let mut sim = Simulation::new(&cfg, any_policy(rng)).map_err(|e| e.to_string())?;
    let mut last = Micros::ZERO;
    while let Some(t) = sim.step().map_err(|e| e.to_string())? {
        if t < last {
            return Err(format!("clock went back from {last} to {t}"));
        }
        last = t;
        if !sim.ledger().conservation_holds() {
            return Err(format!("subtask conservation broken at {t}"));
        }
        if !sim.work_conserving() {
            return Err(format!("idle pod with queued work at {t}"));
        }
    }
    if sim.ledger().open_queries() != 0 || sim.ledger().in_flight_subtasks() != 0 {
        return Err("run ended with open queries".into());
    }
    Ok(())
}

/// Mean queue length equals arrival rate times mean wait, per node.
pub fn littles_law(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let exec_load = rng.random_range(0.3..0.7);
    let mut cfg = small_config(rng, 1.0);
    // the load formula assumes every node is equally likely to be touched
    cfg.placement = Placement::Random;
    let per_node = exec_load / ((cfg.segments.exec_ms + cfg.segments.comm_ms / 2.0) / 1e3);
    let scale = per_node * cfg.pods_per_node as f64;
    cfg.rate *= scale;
    // about 4000 subtasks per node in the measured window
    let span = 4_000.0 / scale;
    cfg.warmup_s = 0.1 * span;
    cfg.duration_s = cfg.warmup_s + span;
    let policy = any_policy(rng);
    let out = Simulation::new(&cfg, policy).and_then(|s| s.run()).map_err(|e| e.to_string())?;
    let t = out.measured_span.as_f64_us();
    for (i, iad) in out.node_stats.iter().enumerate() {
        for (j, s) in iad.iter().enumerate() {
            if s.dequeued < 500 || s.total_wait_us == 0.0 {
                continue;
            }
            let l = s.queue_area_us / t;
            let lambda_w = (s.enqueued as f64 / t) * (s.total_wait_us / s.dequeued as f64);
            let rel = (l - lambda_w).abs() / lambda_w;
            if rel > 0.10 {
                return Err(format!(
                    "{policy} node {i}/{j}: L={l:.4} lambda*W={lambda_w:.4} ({:.1}% off)",
                    rel * 100.0
                ));
            }
        }
    }
    Ok(())
}

pub const ALL: [(&str, Check); 4] = [
    ("EDFQ ordering oracle", edfq_order),
    ("fork-join conservation", fork_join_conservation),
    ("Little's law", littles_law),
    ("monotone p_t in k_q", monotone_task_percentile),
];

/// Every check at `cases` cases each.
pub fn verify_all(cases: u32, seed: u64) -> Vec<CheckReport> {
    ALL.iter().map(|&(name, check)| run_cases(name, check, cases, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_on_a_few_cases() {
        for r in verify_all(20, 5) {
            assert!(r.failure.is_none(), "{}: {:?}", r.name, r.failure);
        }
    }
}
