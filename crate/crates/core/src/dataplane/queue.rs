use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use super::{DataPlaneError, QueuePolicy, Subtask, SubtaskId};
use crate::control::NodeId;
use crate::dist::{DistError, UnloadedEstimator};
use crate::registry::AreaId;
use crate::units::Micros;

struct Entry {
    key: i64,
    seq: u64,
    subtask: Subtask,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.seq == other.seq
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.key, self.seq).cmp(&(other.key, other.seq))
    }
}

/// A subtask queue ordered by `(policy key, arrival sequence)`.
///
/// EDFQ keys on the queuing deadline, SPR on the class priority and FIFO on
/// nothing, so ties always fall back to arrival order.
pub struct PolicyQueue {
    policy: QueuePolicy,
    heap: BinaryHeap<Reverse<Entry>>,
    seq: u64,
}

impl PolicyQueue {
    pub fn new(policy: QueuePolicy) -> Self {
        PolicyQueue { policy, heap: BinaryHeap::new(), seq: 0 }
    }

    pub fn policy(&self) -> QueuePolicy {
        self.policy
    }

    fn key(&self, s: &Subtask) -> i64 {
        match self.policy {
            QueuePolicy::Edfq => s.budget.deadline.as_us(),
            QueuePolicy::Fifo => 0,
            QueuePolicy::Spr => s.class.priority as i64,
        }
    }

    pub fn push(&mut self, subtask: Subtask) {
        let key = self.key(&subtask);
        self.seq += 1;
        self.heap.push(Reverse(Entry { key, seq: self.seq, subtask }));
    }

    pub fn pop(&mut self) -> Option<Subtask> {
        self.heap.pop().map(|Reverse(e)| e.subtask)
    }

    pub fn peek(&self) -> Option<&Subtask> {
        self.heap.peek().map(|Reverse(e)| &e.subtask)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

impl std::fmt::Debug for PolicyQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyQueue")
            .field("policy", &self.policy)
            .field("len", &self.heap.len())
            .finish()
    }
}

/// Counters for one edge node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeStats {
    pub enqueued: u64,
    pub dequeued: u64,
    pub completed: u64,
    pub deadline_misses: u64,
    pub infeasible: u64,
    /// Sum of queueing delays of dequeued subtasks, microseconds.
    pub total_wait_us: f64,
    /// Time integral of the queue length, microsecond-subtasks.
    pub queue_area_us: f64,
    pub busy_area_us: f64,
    last_change: Micros,
}

impl NodeStats {
    /// Queue statistics restarted at `now`, for warmup exclusion.
    fn reset(&mut self, now: Micros) {
        *self = NodeStats { last_change: now, ..NodeStats::default() };
    }
}

/// One edge node: its policy-ordered subtask queue, its pods and its
/// unloaded response-time estimator.
#[derive(Debug)]
pub struct EdgeNodeState {
    pub id: NodeId,
    pub areas: BTreeSet<AreaId>,
    queue: PolicyQueue,
    pods: u32,
    busy: u32,
    outstanding: Vec<SubtaskId>,
    estimator: UnloadedEstimator,
    stats: NodeStats,
}

impl EdgeNodeState {
    pub fn new(
        id: NodeId,
        areas: BTreeSet<AreaId>,
        policy: QueuePolicy,
        pods: u32,
        estimator: UnloadedEstimator,
    ) -> Result<Self, DataPlaneError> {
        if pods == 0 {
            return Err(DataPlaneError::NoPods);
        }
        Ok(EdgeNodeState {
            id,
            areas,
            queue: PolicyQueue::new(policy),
            pods,
            busy: 0,
            outstanding: Vec::new(),
            estimator,
            stats: NodeStats::default(),
        })
    }

    pub fn policy(&self) -> QueuePolicy {
        self.queue.policy()
    }

    pub fn pods(&self) -> u32 {
        self.pods
    }

    pub fn busy_pods(&self) -> u32 {
        self.busy
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn head(&self) -> Option<&Subtask> {
        self.queue.peek()
    }

    pub fn estimator(&self) -> &UnloadedEstimator {
        &self.estimator
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn reset_stats(&mut self, now: Micros) {
        self.stats.reset(now);
    }

    /// No pod idles while work is waiting.
    pub fn is_work_conserving(&self) -> bool {
        self.queue.is_empty() || self.busy == self.pods
    }

    fn advance(&mut self, now: Micros) {
        let dt = (now - self.stats.last_change).as_f64_us();
        if dt > 0.0 {
            self.stats.queue_area_us += dt * self.queue.len() as f64;
            self.stats.busy_area_us += dt * self.busy as f64;
            self.stats.last_change = now;
        }
    }

    /// Brings the time integrals up to `now` without changing state.
    pub fn observe(&mut self, now: Micros) {
        self.advance(now);
    }

    /// Inserts at the subtask's enqueue time `t_0`.
    pub fn enqueue(&mut self, subtask: Subtask) {
        self.advance(subtask.budget.enqueued_at);
        self.stats.enqueued += 1;
        if subtask.budget.infeasible {
            self.stats.infeasible += 1;
        }
        self.queue.push(subtask);
    }

    /// Removes the head of the queue regardless of pod state. A head whose
    /// deadline has passed is still served and counted as a miss.
    pub fn dequeue(&mut self, now: Micros) -> Option<Subtask> {
        self.advance(now);
        let mut s = self.queue.pop()?;
        s.dequeued_at = Some(now);
        s.missed_deadline = now > s.budget.deadline;
        self.stats.dequeued += 1;
        self.stats.total_wait_us += (now - s.budget.enqueued_at).as_f64_us();
        if s.missed_deadline {
            self.stats.deadline_misses += 1;
        }
        Some(s)
    }

    /// Hands the head of the queue to an idle pod, if there is one.
    pub fn start_next(&mut self, now: Micros) -> Option<Subtask> {
        if self.busy >= self.pods {
            return None;
        }
        let s = self.dequeue(now)?;
        self.busy += 1;
        self.outstanding.push(s.id);
        Some(s)
    }

    /// The pod running a subtask became idle.
    pub fn release_pod(&mut self, now: Micros) -> Result<(), DataPlaneError> {
        if self.busy == 0 {
            return Err(DataPlaneError::NoBusyPod);
        }
        self.advance(now);
        self.busy -= 1;
        Ok(())
    }

    /// Closes out a subtask whose result has returned and feeds its
    /// unloaded response time to the estimator.
    pub fn complete_subtask(&mut self, subtask: &Subtask) -> Result<(), DataPlaneError> {
        let pos = self
            .outstanding
            .iter()
            .position(|&id| id == subtask.id)
            .ok_or(DataPlaneError::NotOutstanding(subtask.id))?;
        self.outstanding.swap_remove(pos);
        self.stats.completed += 1;
        self.estimator
            .record_sample(subtask.work.unloaded())
            .map_err(|e: DistError| e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::SubtaskBudget;
    use crate::dataplane::{IadSlot, QueryClass, QueryId, SubtaskWork, TaskId};
    use crate::dist::DEFAULT_WINDOW;

    pub(crate) fn subtask(id: u64, deadline: i64, priority: u16) -> Subtask {
        Subtask {
            id: SubtaskId(id),
            task: TaskId(id),
            query: QueryId(id),
            iad: IadSlot(0),
            node: 0,
            class: QueryClass { id: priority, priority },
            budget: SubtaskBudget {
                enqueued_at: Micros(0),
                queuing_budget: Micros(deadline),
                deadline: Micros(deadline),
                infeasible: false,
            },
            work: SubtaskWork::default(),
            dequeued_at: None,
            missed_deadline: false,
        }
    }

    fn node(policy: QueuePolicy) -> EdgeNodeState {
        EdgeNodeState::new(
            NodeId(0),
            BTreeSet::new(),
            policy,
            1,
            UnloadedEstimator::new(DEFAULT_WINDOW, Micros::from_millis(100)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn edfq_orders_by_deadline() {
        let mut n = node(QueuePolicy::Edfq);
        n.enqueue(subtask(1, 5, 0));
        n.enqueue(subtask(2, 9, 0));
        n.enqueue(subtask(3, 3, 0));
        assert_eq!(n.head().unwrap().id, SubtaskId(3));
        let order: Vec<_> = std::iter::from_fn(|| n.dequeue(Micros(0))).map(|s| s.id.0).collect();
        assert_eq!(order, vec![3, 1, 2]);
        assert!(n.dequeue(Micros(0)).is_none());
    }

    #[test]
    fn edfq_ties_are_fifo() {
        let mut n = node(QueuePolicy::Edfq);
        for id in 1..=4 {
            n.enqueue(subtask(id, 7, 0));
        }
        let order: Vec<_> = std::iter::from_fn(|| n.dequeue(Micros(0))).map(|s| s.id.0).collect();
        assert_eq!(order, vec![1, 2, 3, 4]);
    }

    #[test]
    fn spr_puts_higher_class_first() {
        let mut n = node(QueuePolicy::Spr);
        n.enqueue(subtask(1, 0, 2));
        n.enqueue(subtask(2, 100, 1));
        n.enqueue(subtask(3, 0, 1));
        let order: Vec<_> = std::iter::from_fn(|| n.dequeue(Micros(0))).map(|s| s.id.0).collect();
        assert_eq!(order, vec![2, 3, 1]);
    }

    #[test]
    fn fifo_ignores_deadlines() {
        let mut n = node(QueuePolicy::Fifo);
        n.enqueue(subtask(1, 9, 3));
        n.enqueue(subtask(2, 1, 1));
        n.enqueue(subtask(3, 5, 2));
        let order: Vec<_> = std::iter::from_fn(|| n.dequeue(Micros(0))).map(|s| s.id.0).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn late_head_is_served_and_counted() {
        let mut n = node(QueuePolicy::Edfq);
        n.enqueue(subtask(1, 10, 0));
        let s = n.start_next(Micros(50)).unwrap();
        assert!(s.missed_deadline);
        assert_eq!(s.queueing_delay(), Some(Micros(50)));
        assert_eq!(n.stats().deadline_misses, 1);
    }

    #[test]
    fn pods_limit_concurrency() {
        let mut n = node(QueuePolicy::Fifo);
        n.enqueue(subtask(1, 0, 0));
        n.enqueue(subtask(2, 0, 0));
        let a = n.start_next(Micros(0)).unwrap();
        assert!(n.start_next(Micros(0)).is_none());
        assert!(n.is_work_conserving());
        n.release_pod(Micros(10)).unwrap();
        assert!(!n.is_work_conserving());
        n.complete_subtask(&a).unwrap();
        assert_eq!(n.complete_subtask(&a), Err(DataPlaneError::NotOutstanding(a.id)));
        assert_eq!(n.release_pod(Micros(10)), Err(DataPlaneError::NoBusyPod));
    }

    #[test]
    fn zero_pods_rejected() {
        let est = UnloadedEstimator::new(DEFAULT_WINDOW, Micros(1)).unwrap();
        assert!(matches!(
            EdgeNodeState::new(NodeId(0), BTreeSet::new(), QueuePolicy::Edfq, 0, est),
            Err(DataPlaneError::NoPods)
        ));
    }
}
