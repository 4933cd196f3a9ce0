//! Two-tier fork-join data plane.
//!
//! A [`QueryScheduler`] matches a query's areas against the service pool,
//! budgets each task from the query SLO and fanout, and emits one [`Task`]
//! per matched IAD. Inside an IAD, an [`IadScheduler`] matches a task's
//! sub-areas to edge nodes, computes the shared queuing deadline and
//! enqueues one [`Subtask`] per node. Each [`EdgeNodeState`] orders its
//! queue by the active [`QueuePolicy`]. The [`ForkJoinLedger`] joins
//! completions back into task and query results.

mod forkjoin;
mod queue;
mod scheduler;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forkjoin::{aggregate, ForkJoinLedger, QueryResult, QueryStatus, TaskOutcome, TaskResolution};
pub use queue::{EdgeNodeState, NodeStats, PolicyQueue};
pub use scheduler::{DispatchedTask, IadScheduler, QueryScheduler};

use crate::budget::{BudgetError, QuerySlo, SubtaskBudget, TaskBudget};
use crate::control::ServiceId;
use crate::dist::DistError;
use crate::registry::AreaId;
use crate::units::Micros;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataPlaneError {
    #[error("query {0} covers no area served by the pool")]
    UncoveredArea(QueryId),
    #[error("task {0} covers no area served by the IAD's edge nodes")]
    UncoveredSubArea(TaskId),
    #[error("query {query} is for service {got}, scheduler serves {want}")]
    WrongService { query: QueryId, got: ServiceId, want: ServiceId },
    #[error("subtask {0} is not outstanding on this node")]
    NotOutstanding(SubtaskId),
    #[error("no busy pod to release")]
    NoBusyPod,
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown query {0}")]
    UnknownQuery(QueryId),
    #[error("edge node needs at least one pod")]
    NoPods,
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

macro_rules! numeric_id {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

numeric_id!(QueryId);
numeric_id!(TaskId);
numeric_id!(SubtaskId);

/// Index of an IAD within a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IadSlot(pub u32);

/// Dense handle for an interned [`AreaId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaKey(pub u32);

/// Interns area names so that matching works on integers.
#[derive(Debug, Default, Clone)]
pub struct AreaTable {
    keys: HashMap<AreaId, AreaKey>,
    names: Vec<AreaId>,
}

impl AreaTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, area: &AreaId) -> AreaKey {
        if let Some(&k) = self.keys.get(area) {
            return k;
        }
        let k = AreaKey(self.names.len() as u32);
        self.names.push(area.clone());
        self.keys.insert(area.clone(), k);
        k
    }

    pub fn key(&self, area: &AreaId) -> Option<AreaKey> {
        self.keys.get(area).copied()
    }

    pub fn name(&self, key: AreaKey) -> Option<&AreaId> {
        self.names.get(key.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Monotone id source shared by both scheduling tiers.
#[derive(Debug, Default, Clone)]
pub struct IdGen {
    next: u64,
}

impl IdGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_raw(&mut self) -> u64 {
        self.next += 1;
        self.next
    }

    pub fn task(&mut self) -> TaskId {
        TaskId(self.next_raw())
    }

    pub fn subtask(&mut self) -> SubtaskId {
        SubtaskId(self.next_raw())
    }
}

/// Subtask queuing policy at an edge node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueuePolicy {
    /// Earliest subtask queuing deadline first.
    Edfq,
    /// Arrival order.
    Fifo,
    /// Strict priority by query class, arrival order within a class.
    Spr,
}

impl QueuePolicy {
    pub const ALL: [QueuePolicy; 3] = [QueuePolicy::Edfq, QueuePolicy::Fifo, QueuePolicy::Spr];

    pub fn name(self) -> &'static str {
        match self {
            QueuePolicy::Edfq => "edfq",
            QueuePolicy::Fifo => "fifo",
            QueuePolicy::Spr => "spr",
        }
    }
}

impl fmt::Display for QueuePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for QueuePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "edfq" => Ok(QueuePolicy::Edfq),
            "fifo" => Ok(QueuePolicy::Fifo),
            "spr" => Ok(QueuePolicy::Spr),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

/// Query class: `id` identifies the class for reporting, `priority` is the
/// SPR level (smaller is more urgent). Sub-classes share a priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryClass {
    pub id: u16,
    pub priority: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: QueryId,
    pub service: ServiceId,
    pub class: QueryClass,
    /// Sorted, no duplicates.
    pub areas: Vec<AreaKey>,
    pub slo: QuerySlo,
    pub arrival: Micros,
    pub origin: IadSlot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub query: QueryId,
    pub class: QueryClass,
    pub target: IadSlot,
    pub sub_areas: Vec<AreaKey>,
    pub budget: TaskBudget,
}

/// Modelled time a subtask spends after leaving the queue: dispatch to the
/// node, execution in a pod, and the return trip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubtaskWork {
    pub dispatch: Micros,
    pub exec: Micros,
    pub ret: Micros,
}

impl SubtaskWork {
    /// Response time without queuing.
    pub fn unloaded(&self) -> Micros {
        self.dispatch + self.exec + self.ret
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subtask {
    pub id: SubtaskId,
    pub task: TaskId,
    pub query: QueryId,
    pub iad: IadSlot,
    /// Index of the edge node within its IAD, the mapping `m(i)`.
    pub node: u32,
    pub class: QueryClass,
    pub budget: SubtaskBudget,
    pub work: SubtaskWork,
    pub dequeued_at: Option<Micros>,
    pub missed_deadline: bool,
}

impl Subtask {
    pub fn queueing_delay(&self) -> Option<Micros> {
        self.dequeued_at.map(|t| t - self.budget.enqueued_at)
    }
}
