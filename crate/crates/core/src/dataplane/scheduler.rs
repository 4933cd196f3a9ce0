use std::collections::{BTreeMap, HashMap};

use super::{
    AreaKey, AreaTable, DataPlaneError, EdgeNodeState, IadSlot, IdGen, Query, QueryId, Subtask,
    SubtaskWork, Task, TaskId,
};
use crate::budget::{subtask_queuing_budget, task_percentile, SubtaskBudget};
use crate::control::{ServiceId, ServiceInstance};
use crate::dist::UnloadedEstimator;
use crate::registry::IadName;
use crate::units::Micros;

/// Upper-tier scheduler for one service: IAD matching, task budgeting and
/// task construction.
#[derive(Debug, Clone)]
pub struct QueryScheduler {
    service: ServiceId,
    owners: HashMap<AreaKey, Vec<IadSlot>>,
    members: Vec<IadSlot>,
}

impl QueryScheduler {
    pub fn new(service: ServiceId) -> Self {
        QueryScheduler { service, owners: HashMap::new(), members: Vec::new() }
    }

    /// Builds the matching index from a service pool. Members whose name has
    /// no slot are skipped.
    pub fn from_instance(
        instance: &ServiceInstance,
        slots: &BTreeMap<IadName, IadSlot>,
        table: &mut AreaTable,
    ) -> Self {
        let mut qs = QueryScheduler::new(instance.service_id.clone());
        for member in instance.data_members() {
            if let Some(&slot) = slots.get(&member.iad) {
                let keys: Vec<AreaKey> =
                    member.covered_areas.iter().map(|a| table.intern(a)).collect();
                qs.add_member(slot, keys);
            }
        }
        qs
    }

    pub fn service(&self) -> &ServiceId {
        &self.service
    }

    pub fn members(&self) -> &[IadSlot] {
        &self.members
    }

    pub fn add_member(&mut self, slot: IadSlot, areas: impl IntoIterator<Item = AreaKey>) {
        if !self.members.contains(&slot) {
            self.members.push(slot);
        }
        for a in areas {
            let owners = self.owners.entry(a).or_default();
            if !owners.contains(&slot) {
                owners.push(slot);
            }
        }
    }

    /// Stops routing new tasks to `slot`. Tasks already dispatched are
    /// unaffected.
    pub fn remove_member(&mut self, slot: IadSlot) -> bool {
        let before = self.members.len();
        self.members.retain(|&s| s != slot);
        self.owners.retain(|_, owners| {
            owners.retain(|&s| s != slot);
            !owners.is_empty()
        });
        before != self.members.len()
    }

    /// Groups `areas` by every pool member covering them, in slot order.
    pub fn match_iads(&self, areas: &[AreaKey]) -> BTreeMap<IadSlot, Vec<AreaKey>> {
        let mut out: BTreeMap<IadSlot, Vec<AreaKey>> = BTreeMap::new();
        for a in areas {
            if let Some(owners) = self.owners.get(a) {
                for &slot in owners {
                    out.entry(slot).or_default().push(*a);
                }
            }
        }
        out
    }

    /// Matches, budgets with `k_q` = number of matched IADs, and builds one
    /// task per matched IAD.
    pub fn schedule_query(&self, q: &Query, ids: &mut IdGen) -> Result<Vec<Task>, DataPlaneError> {
        if q.service != self.service {
            return Err(DataPlaneError::WrongService {
                query: q.id,
                got: q.service.clone(),
                want: self.service.clone(),
            });
        }
        let matched = self.match_iads(&q.areas);
        if matched.is_empty() {
            return Err(DataPlaneError::UncoveredArea(q.id));
        }
        let budget = task_percentile(q.slo, matched.len() as u32)?;
        Ok(matched
            .into_iter()
            .map(|(target, sub_areas)| Task {
                id: ids.task(),
                query: q.id,
                class: q.class,
                target,
                sub_areas,
                budget,
            })
            .collect())
    }
}

/// What [`IadScheduler::schedule_task`] did with a task.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchedTask {
    pub task: TaskId,
    pub query: QueryId,
    /// Edge node indices, one subtask each; `k_t = nodes.len()`.
    pub nodes: Vec<u32>,
    pub budget: SubtaskBudget,
    pub unloaded_tail: Micros,
}

impl DispatchedTask {
    pub fn fanout(&self) -> u32 {
        self.nodes.len() as u32
    }
}

/// Lower-tier scheduler inside one IAD: sub-area matching, deadline
/// estimation and subtask dispatch to per-node queues. Queues are held
/// centrally, one per edge node.
#[derive(Debug)]
pub struct IadScheduler {
    slot: IadSlot,
    name: IadName,
    nodes: Vec<EdgeNodeState>,
    area_nodes: HashMap<AreaKey, Vec<u32>>,
}

impl IadScheduler {
    pub fn new(slot: IadSlot, name: IadName, nodes: Vec<EdgeNodeState>, table: &mut AreaTable) -> Self {
        let mut area_nodes: HashMap<AreaKey, Vec<u32>> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            for a in &n.areas {
                area_nodes.entry(table.intern(a)).or_default().push(i as u32);
            }
        }
        IadScheduler { slot, name, nodes, area_nodes }
    }

    pub fn slot(&self) -> IadSlot {
        self.slot
    }

    pub fn name(&self) -> &IadName {
        &self.name
    }

    pub fn nodes(&self) -> &[EdgeNodeState] {
        &self.nodes
    }

    pub fn node(&self, i: u32) -> &EdgeNodeState {
        &self.nodes[i as usize]
    }

    pub fn node_mut(&mut self, i: u32) -> &mut EdgeNodeState {
        &mut self.nodes[i as usize]
    }

    /// Edge nodes covering any of `sub_areas`, ascending, without repeats.
    pub fn match_nodes(&self, sub_areas: &[AreaKey]) -> Vec<u32> {
        let mut out: Vec<u32> = sub_areas
            .iter()
            .filter_map(|a| self.area_nodes.get(a))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Matches the task to edge nodes, stamps `t_0 = now` and one shared
    /// `t_D`, and enqueues a subtask at every matched node. `work` supplies
    /// the modelled post-queue times for the subtask sent to a node.
    pub fn schedule_task(
        &mut self,
        task: &Task,
        now: Micros,
        ids: &mut IdGen,
        mut work: impl FnMut(u32) -> SubtaskWork,
    ) -> Result<DispatchedTask, DataPlaneError> {
        let nodes = self.match_nodes(&task.sub_areas);
        if nodes.is_empty() {
            return Err(DataPlaneError::UncoveredSubArea(task.id));
        }
        let q = {
            let cdfs: Vec<&UnloadedEstimator> =
                nodes.iter().map(|&i| self.nodes[i as usize].estimator()).collect();
            subtask_queuing_budget(task.budget, &cdfs)?
        };
        let budget = SubtaskBudget::new(now, q);
        for &i in &nodes {
            let s = Subtask {
                id: ids.subtask(),
                task: task.id,
                query: task.query,
                iad: self.slot,
                node: i,
                class: task.class,
                budget,
                work: work(i),
                dequeued_at: None,
                missed_deadline: false,
            };
            self.nodes[i as usize].enqueue(s);
        }
        Ok(DispatchedTask {
            task: task.id,
            query: task.query,
            nodes,
            budget,
            unloaded_tail: q.unloaded_tail,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::budget::QuerySlo;
    use crate::control::NodeId;
    use crate::dataplane::{QueryClass, QueuePolicy};
    use crate::dist::DEFAULT_WINDOW;
    use crate::registry::AreaId;

    fn keys(table: &mut AreaTable, names: &[&str]) -> Vec<AreaKey> {
        let mut v: Vec<_> = names.iter().map(|n| table.intern(&AreaId::from(*n))).collect();
        v.sort();
        v
    }

    fn query(areas: Vec<AreaKey>) -> Query {
        Query {
            id: QueryId(1),
            service: ServiceId("svc".into()),
            class: QueryClass { id: 1, priority: 1 },
            areas,
            slo: QuerySlo::new(99.0, Micros::from_millis(500)).unwrap(),
            arrival: Micros(0),
            origin: IadSlot(0),
        }
    }

    fn iad(table: &mut AreaTable, nodes: u32, prior_ms: i64) -> IadScheduler {
        let nodes = (0..nodes)
            .map(|i| {
                EdgeNodeState::new(
                    NodeId(i),
                    BTreeSet::from([AreaId::new(format!("n{i}"))]),
                    QueuePolicy::Edfq,
                    1,
                    UnloadedEstimator::new(DEFAULT_WINDOW, Micros::from_millis(prior_ms)).unwrap(),
                )
                .unwrap()
            })
            .collect();
        IadScheduler::new(IadSlot(0), "IAD".into(), nodes, table)
    }

    #[test]
    fn fanout_follows_coverage() {
        let mut table = AreaTable::new();
        let mut qs = QueryScheduler::new(ServiceId("svc".into()));
        let a = keys(&mut table, &["a"]);
        let b = keys(&mut table, &["b"]);
        qs.add_member(IadSlot(0), a.clone());
        qs.add_member(IadSlot(1), b.clone());
        qs.add_member(IadSlot(2), b.clone());
        let mut ids = IdGen::new();

        let tasks = qs.schedule_query(&query(a.clone()), &mut ids).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].budget.percentile.value(), 99.0);

        // two redundant IADs on the same area both get a task
        let tasks = qs.schedule_query(&query(b.clone()), &mut ids).unwrap();
        assert_eq!(tasks.iter().map(|t| t.target).collect::<Vec<_>>(), vec![IadSlot(1), IadSlot(2)]);
        assert!(tasks[0].budget.percentile.value() > 99.0);
        assert_eq!(tasks[0].budget, tasks[1].budget);

        let c = keys(&mut table, &["c"]);
        assert_eq!(
            qs.schedule_query(&query(c), &mut ids),
            Err(DataPlaneError::UncoveredArea(QueryId(1)))
        );

        assert!(qs.remove_member(IadSlot(2)));
        assert_eq!(qs.schedule_query(&query(b), &mut ids).unwrap().len(), 1);
    }

    #[test]
    fn wrong_service_is_rejected() {
        let qs = QueryScheduler::new(ServiceId("other".into()));
        let err = qs.schedule_query(&query(vec![]), &mut IdGen::new()).unwrap_err();
        assert!(matches!(err, DataPlaneError::WrongService { .. }));
    }

    #[test]
    fn task_fans_out_with_one_deadline() {
        let mut table = AreaTable::new();
        let mut iad = iad(&mut table, 8, 100);
        let sub = keys(&mut table, &["n0", "n1", "n2", "n3", "n4", "n5", "n6", "n7"]);
        let task = Task {
            id: TaskId(7),
            query: QueryId(1),
            class: QueryClass { id: 3, priority: 3 },
            target: IadSlot(0),
            sub_areas: sub,
            budget: crate::budget::TaskBudget {
                percentile: crate::units::Percentile::new(99.749).unwrap(),
                bound: Micros::from_millis(1200),
            },
        };
        let d = iad.schedule_task(&task, Micros(1_000), &mut IdGen::new(), |_| SubtaskWork::default()).unwrap();
        assert_eq!(d.fanout(), 8);
        let deadlines: BTreeSet<_> =
            iad.nodes().iter().map(|n| n.head().unwrap().budget.deadline).collect();
        assert_eq!(deadlines.len(), 1);
        assert_eq!(d.budget.deadline, d.budget.enqueued_at + d.budget.queuing_budget);
        assert_eq!(d.budget.enqueued_at, Micros(1_000));
    }

    #[test]
    fn infeasible_budget_gets_immediate_deadline() {
        let mut table = AreaTable::new();
        let mut iad = iad(&mut table, 1, 1_000);
        let task = Task {
            id: TaskId(1),
            query: QueryId(1),
            class: QueryClass { id: 1, priority: 1 },
            target: IadSlot(0),
            sub_areas: keys(&mut table, &["n0"]),
            budget: crate::budget::TaskBudget {
                percentile: crate::units::Percentile::new(99.0).unwrap(),
                bound: Micros::from_millis(10),
            },
        };
        let d = iad.schedule_task(&task, Micros(5), &mut IdGen::new(), |_| SubtaskWork::default()).unwrap();
        assert!(d.budget.infeasible);
        assert_eq!(d.budget.deadline, Micros(5));
    }

    #[test]
    fn uncovered_sub_area_fails_task() {
        let mut table = AreaTable::new();
        let mut iad = iad(&mut table, 2, 100);
        let task = Task {
            id: TaskId(9),
            query: QueryId(1),
            class: QueryClass { id: 1, priority: 1 },
            target: IadSlot(0),
            sub_areas: keys(&mut table, &["elsewhere"]),
            budget: crate::budget::TaskBudget {
                percentile: crate::units::Percentile::new(99.0).unwrap(),
                bound: Micros::from_millis(10),
            },
        };
        assert_eq!(
            iad.schedule_task(&task, Micros(0), &mut IdGen::new(), |_| SubtaskWork::default()),
            Err(DataPlaneError::UncoveredSubArea(TaskId(9)))
        );
    }
}
