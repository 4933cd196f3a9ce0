use std::collections::BTreeSet;

use proptest::prelude::*;
use sas_core::budget::SubtaskBudget;
use sas_core::control::NodeId;
use sas_core::dataplane::{
    EdgeNodeState, IadSlot, PolicyQueue, QueryClass, QueryId, QueuePolicy, Subtask, SubtaskId,
    SubtaskWork, TaskId,
};
use sas_core::dist::{UnloadedEstimator, DEFAULT_WINDOW};
use sas_core::Micros;

#[derive(Debug, Clone)]
enum Op {
    Push { deadline: i64, priority: u16 },
    Pop,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0i64..50, 1u16..4).prop_map(|(deadline, priority)| Op::Push { deadline, priority }),
        2 => Just(Op::Pop),
    ]
}

fn subtask(id: u64, enqueued_at: i64, deadline: i64, priority: u16) -> Subtask {
    Subtask {
        id: SubtaskId(id),
        task: TaskId(id),
        query: QueryId(id),
        iad: IadSlot(0),
        node: 0,
        class: QueryClass { id: priority, priority },
        budget: SubtaskBudget {
            enqueued_at: Micros(enqueued_at),
            queuing_budget: Micros(deadline - enqueued_at),
            deadline: Micros(deadline),
            infeasible: false,
        },
        work: SubtaskWork::default(),
        dequeued_at: None,
        missed_deadline: false,
    }
}

/// Linear-scan reference: minimum `(key, arrival)` in a plain vector.
fn oracle_pop(pending: &mut Vec<(i64, u64)>) -> Option<u64> {
    let (i, _) = pending.iter().enumerate().min_by_key(|(_, &(k, seq))| (k, seq))?;
    Some(pending.remove(i).1)
}

fn key(policy: QueuePolicy, deadline: i64, priority: u16) -> i64 {
    match policy {
        QueuePolicy::Edfq => deadline,
        QueuePolicy::Fifo => 0,
        QueuePolicy::Spr => priority as i64,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dequeue_matches_sorted_oracle(ops in prop::collection::vec(op(), 1..200)) {
        for policy in QueuePolicy::ALL {
            let mut q = PolicyQueue::new(policy);
            let mut pending = Vec::new();
            let mut next = 0u64;
            for o in &ops {
                match *o {
                    Op::Push { deadline, priority } => {
                        next += 1;
                        q.push(subtask(next, 0, deadline, priority));
                        pending.push((key(policy, deadline, priority), next));
                    }
                    Op::Pop => {
                        let got = q.pop().map(|s| s.id.0);
                        prop_assert_eq!(got, oracle_pop(&mut pending), "{}", policy);
                    }
                }
                prop_assert_eq!(q.len(), pending.len());
            }
            while let Some(want) = oracle_pop(&mut pending) {
                prop_assert_eq!(q.pop().map(|s| s.id.0), Some(want));
            }
            prop_assert!(q.is_empty());
        }
    }

    #[test]
    fn misses_are_flagged_exactly_when_late(
        deadlines in prop::collection::vec(0i64..100, 1..50),
        now in 0i64..120,
    ) {
        let est = UnloadedEstimator::new(DEFAULT_WINDOW, Micros(1_000)).unwrap();
        let mut node =
            EdgeNodeState::new(NodeId(0), BTreeSet::new(), QueuePolicy::Edfq, 1, est).unwrap();
        for (i, &d) in deadlines.iter().enumerate() {
            node.enqueue(subtask(i as u64, 0, d, 1));
        }
        let mut late = 0;
        while let Some(s) = node.dequeue(Micros(now)) {
            prop_assert_eq!(s.missed_deadline, now > s.budget.deadline.as_us());
            late += s.missed_deadline as u64;
        }
        prop_assert_eq!(node.stats().deadline_misses, late);
    }
}

#[test]
fn pods_never_idle_with_work_waiting() {
    let est = UnloadedEstimator::new(DEFAULT_WINDOW, Micros(1_000)).unwrap();
    let mut node = EdgeNodeState::new(NodeId(0), BTreeSet::new(), QueuePolicy::Fifo, 2, est).unwrap();
    for i in 0..5 {
        node.enqueue(subtask(i, 0, 10, 1));
    }
    while node.start_next(Micros(0)).is_some() {}
    assert_eq!(node.busy_pods(), 2);
    assert_eq!(node.queue_len(), 3);
    assert!(node.is_work_conserving());
    node.release_pod(Micros(5)).unwrap();
    assert!(!node.is_work_conserving());
    assert!(node.start_next(Micros(5)).is_some());
    assert!(node.is_work_conserving());
}
