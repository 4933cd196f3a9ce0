//! Budget decomposition and resource estimation.
//!
//! A query SLO `(p_q, x_pq)` with fanout `k_q` becomes a per-task budget
//! `(p_t, x_pt = x_pq)` with `p_q/100 = (p_t/100)^k_q`. A task's budget in
//! turn becomes one queuing deadline shared by all of its subtasks:
//! `t_D = t_0 + t_Q` with `t_Q = x_pt - G^{-1}(p_t/100)`, where `G` is the
//! product of the unloaded response-time CDFs of the edge nodes involved.
//!
//! The M/M/1 reference estimator sizes an edge pod: given a task arrival
//! rate, a task budget and the number of nodes each task touches, it returns
//! the largest mean subtask execution time that still meets the budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{product_quantile, DistError, ResponseCdf};
use crate::units::{Micros, Percentile, PercentileOutOfRange};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("fanout must be at least 1")]
    ZeroFanout,
    #[error(transparent)]
    Percentile(#[from] PercentileOutOfRange),
    #[error("tail-latency bound must be positive, got {0}")]
    NonPositiveBound(Micros),
    #[error("unstable queue: utilization {0:.4} >= 1")]
    UnstableQueue(f64),
    #[error("requirement infeasible: {0}")]
    RequirementInfeasible(String),
    #[error("no pod configuration meets a mean execution time of {0}")]
    NoConfig(Micros),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// A query tail-latency SLO: the `p_q`-th percentile latency must not
/// exceed `bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySlo {
    pub percentile: Percentile,
    pub bound: Micros,
}

impl QuerySlo {
    pub fn new(percentile: f64, bound: Micros) -> Result<Self, BudgetError> {
        let percentile = Percentile::new(percentile)?;
        if bound <= Micros::ZERO {
            return Err(BudgetError::NonPositiveBound(bound));
        }
        Ok(QuerySlo { percentile, bound })
    }
}

/// Per-task budget: the `p_t`-th percentile task latency must not exceed
/// `bound`, which always equals the originating query's bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskBudget {
    pub percentile: Percentile,
    pub bound: Micros,
}

/// A subtask's queuing deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskBudget {
    pub enqueued_at: Micros,
    pub queuing_budget: Micros,
    pub deadline: Micros,
    /// The task budget is below the unloaded tail; `queuing_budget` was
    /// clamped to zero.
    pub infeasible: bool,
}

/// Queuing delay budget `t_Q`, clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuingBudget {
    pub budget: Micros,
    pub unloaded_tail: Micros,
    pub infeasible: bool,
}

/// `{lambda_t, x_bar, p_bar}` sent to an IAD during negotiation, plus the
/// number of edge nodes each task fans out to at that IAD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mm1Requirement {
    /// Task arrival rate, tasks per second.
    pub task_rate: f64,
    pub task_budget: Micros,
    pub percentile: Percentile,
    pub nodes: u32,
}

/// One pod configuration an IAD can provision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodCatalogEntry {
    pub config_id: String,
    pub mean_exec_time: Micros,
    pub resource_cost: f64,
}

/// `p_t = 100 * (p_q/100)^(1/k_q)`, `x_pt = x_pq`.
pub fn task_percentile(slo: QuerySlo, fanout: u32) -> Result<TaskBudget, BudgetError> {
    if fanout == 0 {
        return Err(BudgetError::ZeroFanout);
    }
    let p_q = slo.percentile.value();
    // rounding must never loosen p_t below p_q or push it to 100
    let p_t = (100.0 * slo.percentile.fraction().powf(1.0 / fanout as f64)).max(p_q);
    let p_t = if fanout == 1 { p_q } else if p_t >= 100.0 { f64_prev(100.0) } else { p_t };
    Ok(TaskBudget { percentile: Percentile::new(p_t)?, bound: slo.bound })
}

fn f64_prev(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// `p_q = 100 * (p_t/100)^k_q`.
pub fn query_percentile(task: Percentile, fanout: u32) -> Result<Percentile, BudgetError> {
    if fanout == 0 {
        return Err(BudgetError::ZeroFanout);
    }
    let p_q = 100.0 * task.fraction().powi(fanout as i32);
    Ok(Percentile::new(p_q)?)
}

/// `t_Q = x_pt - x^u_pt`, where `x^u_pt` is the `p_t` quantile of the
/// product of `cdfs`. Negative budgets clamp to zero and set `infeasible`.
pub fn subtask_queuing_budget<C: ResponseCdf>(
    budget: TaskBudget,
    cdfs: &[C],
) -> Result<QueuingBudget, BudgetError> {
    let unloaded_tail = product_quantile(cdfs, budget.percentile)?;
    let raw = budget.bound - unloaded_tail;
    Ok(QueuingBudget {
        budget: raw.max(Micros::ZERO),
        unloaded_tail,
        infeasible: raw.is_negative(),
    })
}

/// `t_D = t_0 + t_Q`.
pub fn subtask_deadline(enqueued_at: Micros, queuing_budget: Micros) -> Micros {
    enqueued_at + queuing_budget
}

impl SubtaskBudget {
    pub fn new(enqueued_at: Micros, q: QueuingBudget) -> Self {
        SubtaskBudget {
            enqueued_at,
            queuing_budget: q.budget,
            deadline: subtask_deadline(enqueued_at, q.budget),
            infeasible: q.infeasible,
        }
    }
}

/// M/M/1 response-time CDF, `1 - exp(-(1/mean_exec - rate) t)`.
pub fn mm1_response_cdf(task_rate: f64, mean_exec: Micros, t: Micros) -> Result<f64, BudgetError> {
    let mean_s = mean_exec.as_secs_f64();
    let util = task_rate * mean_s;
    if !(util < 1.0) || mean_s <= 0.0 {
        return Err(BudgetError::UnstableQueue(util));
    }
    if t <= Micros::ZERO {
        return Ok(0.0);
    }
    let decay = 1.0 / mean_s - task_rate;
    Ok(-(-decay * t.as_secs_f64()).exp_m1())
}

/// Largest mean subtask execution time `t_e` with which `n` M/M/1 servers
/// fed at `task_rate` meet the task budget at `p_bar`:
/// `t_e = 1 / (lambda - ln(1 - (p/100)^(1/n)) / x_bar)`.
pub fn mm1_subtask_budget(req: &Mm1Requirement) -> Result<Micros, BudgetError> {
    if req.nodes == 0 {
        return Err(BudgetError::ZeroFanout);
    }
    if req.task_budget <= Micros::ZERO {
        return Err(BudgetError::NonPositiveBound(req.task_budget));
    }
    if !(req.task_rate > 0.0) || !req.task_rate.is_finite() {
        return Err(BudgetError::RequirementInfeasible(format!(
            "task rate {} must be positive",
            req.task_rate
        )));
    }
    let per_node = req.percentile.fraction().powf(1.0 / req.nodes as f64);
    let x_bar = req.task_budget.as_secs_f64();
    let denom = req.task_rate - (-per_node).ln_1p() / x_bar;
    if !(denom > 0.0) {
        return Err(BudgetError::RequirementInfeasible(format!(
            "non-positive service budget (denominator {denom:.6})"
        )));
    }
    let t_e = 1.0 / denom;
    // t_e = 1/(lambda + c) with c > 0 always gives lambda * t_e < 1
    debug_assert!(req.task_rate * t_e < 1.0);
    let t_e = Micros::from_secs_f64(t_e);
    if t_e <= Micros::ZERO {
        return Err(BudgetError::RequirementInfeasible(
            "service budget rounds to zero".into(),
        ));
    }
    Ok(t_e)
}

/// Cheapest pod configuration whose mean execution time fits the budget.
/// Ties on cost go to the first entry in catalog order.
pub fn pod_config_select(
    t_e_budget: Micros,
    catalog: &[PodCatalogEntry],
) -> Result<PodCatalogEntry, BudgetError> {
    catalog
        .iter()
        .filter(|e| e.mean_exec_time <= t_e_budget)
        .fold(None::<&PodCatalogEntry>, |best, e| match best {
            Some(b) if b.resource_cost <= e.resource_cost => Some(b),
            _ => Some(e),
        })
        .cloned()
        .ok_or(BudgetError::NoConfig(t_e_budget))
}
