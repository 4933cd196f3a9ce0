use std::collections::HashMap;

use super::{DataPlaneError, DispatchedTask, Query, QueryClass, QueryId, Subtask, Task, TaskId};
use crate::units::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskOutcome {
    Completed { finish: Micros },
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryStatus {
    Completed,
    /// At least one task could not be scheduled.
    Failed,
}

/// Join of every task of one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub query: QueryId,
    pub class: QueryClass,
    pub arrival: Micros,
    pub finish: Micros,
    pub status: QueryStatus,
    pub task_fanouts: Vec<u32>,
    pub deadline_misses: u32,
}

impl QueryResult {
    pub fn latency(&self) -> Micros {
        self.finish - self.arrival
    }

    pub fn query_fanout(&self) -> u32 {
        self.task_fanouts.len() as u32
    }
}

/// The slowest task decides: `finish = max(task finish) + aggregation`.
/// Any failed task fails the query.
pub fn aggregate(
    query: QueryId,
    class: QueryClass,
    arrival: Micros,
    tasks: &[TaskOutcome],
    aggregation: Micros,
) -> QueryResult {
    let mut slowest = arrival;
    let mut failed = tasks.is_empty();
    for t in tasks {
        match *t {
            TaskOutcome::Completed { finish } => slowest = slowest.max(finish),
            TaskOutcome::Failed => failed = true,
        }
    }
    QueryResult {
        query,
        class,
        arrival,
        finish: slowest + aggregation,
        status: if failed { QueryStatus::Failed } else { QueryStatus::Completed },
        task_fanouts: Vec::new(),
        deadline_misses: 0,
    }
}

/// A task whose last subtask just returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskResolution {
    pub task: TaskId,
    pub query: QueryId,
    pub finish: Micros,
    /// Every task of the query is now resolved.
    pub query_ready: bool,
}

#[derive(Debug)]
struct TaskProgress {
    query: QueryId,
    left: u32,
    finish: Micros,
}

#[derive(Debug)]
struct QueryProgress {
    class: QueryClass,
    arrival: Micros,
    left: u32,
    outcomes: Vec<TaskOutcome>,
    fanouts: Vec<u32>,
    misses: u32,
}

/// Fork-join bookkeeping across both tiers.
///
/// Invariant: `spawned == completed + in_flight` after every call.
#[derive(Debug, Default)]
pub struct ForkJoinLedger {
    queries: HashMap<QueryId, QueryProgress>,
    tasks: HashMap<TaskId, TaskProgress>,
    spawned: u64,
    completed: u64,
    in_flight: u64,
}

impl ForkJoinLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn spawned_subtasks(&self) -> u64 {
        self.spawned
    }

    pub fn completed_subtasks(&self) -> u64 {
        self.completed
    }

    pub fn in_flight_subtasks(&self) -> u64 {
        self.in_flight
    }

    pub fn open_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn open_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Recounts in-flight subtasks from the open tasks and checks the
    /// conservation identity.
    pub fn conservation_holds(&self) -> bool {
        let recount: u64 = self.tasks.values().map(|t| t.left as u64).sum();
        recount == self.in_flight && self.spawned == self.completed + self.in_flight
    }

    pub fn open_query(&mut self, query: &Query, tasks: &[Task]) {
        self.queries.insert(
            query.id,
            QueryProgress {
                class: query.class,
                arrival: query.arrival,
                left: tasks.len() as u32,
                outcomes: Vec::with_capacity(tasks.len()),
                fanouts: Vec::with_capacity(tasks.len()),
                misses: 0,
            },
        );
    }

    fn resolve(&mut self, query: QueryId, outcome: TaskOutcome) -> Result<bool, DataPlaneError> {
        let q = self.queries.get_mut(&query).ok_or(DataPlaneError::UnknownQuery(query))?;
        q.outcomes.push(outcome);
        q.left -= 1;
        Ok(q.left == 0)
    }

    pub fn task_dispatched(&mut self, d: &DispatchedTask) -> Result<(), DataPlaneError> {
        let q = self.queries.get_mut(&d.query).ok_or(DataPlaneError::UnknownQuery(d.query))?;
        q.fanouts.push(d.fanout());
        let k = d.fanout();
        self.tasks.insert(d.task, TaskProgress { query: d.query, left: k, finish: Micros::ZERO });
        self.spawned += k as u64;
        self.in_flight += k as u64;
        Ok(())
    }

    /// Returns whether the query is now fully resolved.
    pub fn task_failed(&mut self, task: &Task) -> Result<bool, DataPlaneError> {
        self.resolve(task.query, TaskOutcome::Failed)
    }

    pub fn subtask_completed(
        &mut self,
        s: &Subtask,
        finish: Micros,
    ) -> Result<Option<TaskResolution>, DataPlaneError> {
        let t = self.tasks.get_mut(&s.task).ok_or(DataPlaneError::UnknownTask(s.task))?;
        if t.left == 0 {
            return Err(DataPlaneError::NotOutstanding(s.id));
        }
        t.left -= 1;
        t.finish = t.finish.max(finish);
        self.in_flight -= 1;
        self.completed += 1;
        if s.missed_deadline {
            if let Some(q) = self.queries.get_mut(&s.query) {
                q.misses += 1;
            }
        }
        if t.left > 0 {
            return Ok(None);
        }
        let (query, finish) = (t.query, t.finish);
        self.tasks.remove(&s.task);
        let query_ready = self.resolve(query, TaskOutcome::Completed { finish })?;
        Ok(Some(TaskResolution { task: s.task, query, finish, query_ready }))
    }

    /// Joins a fully resolved query and forgets it.
    pub fn close_query(
        &mut self,
        query: QueryId,
        aggregation: Micros,
    ) -> Result<QueryResult, DataPlaneError> {
        let q = self.queries.remove(&query).ok_or(DataPlaneError::UnknownQuery(query))?;
        debug_assert_eq!(q.left, 0);
        let mut r = aggregate(query, q.class, q.arrival, &q.outcomes, aggregation);
        r.task_fanouts = q.fanouts;
        r.deadline_misses = q.misses;
        Ok(r)
    }
}
