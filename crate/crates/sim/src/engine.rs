//! Discrete-event engine.
//!
//! A query's life: arrival at a scheduler, query evaluation, one task per
//! matched IAD, task evaluation, one subtask per matched edge node into
//! that node's policy queue, pod service (dispatch and execution hold the
//! pod), the return trip, and aggregation once every task has returned.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand_chacha::ChaCha8Rng;
use sas_core::budget::{PodCatalogEntry, QuerySlo};
use sas_core::control::{
    ControlError, ControlPlane, EdgeNodeSpec, IadSite, NodeId, RequirementTemplate, ServiceId,
};
use sas_core::dataplane::{
    AreaKey, AreaTable, DataPlaneError, EdgeNodeState, ForkJoinLedger, IadScheduler, IadSlot,
    IdGen, NodeStats, Query, QueryClass, QueryId, QueryResult, QueryScheduler, QueuePolicy,
    Subtask, SubtaskId, SubtaskWork, Task,
};
use sas_core::dist::UnloadedEstimator;
use sas_core::registry::{AreaId, Capability, CspAccount, IadName, IadRecord, Registry, RegistryError};
use sas_core::{Micros, Percentile};
use thiserror::Error;

use crate::config::SimConfig;
use crate::metrics::LatencyRecorder;
use crate::rng::{substream, Purpose};
use crate::workload::{Arrival, Segment, WorkloadGen};

pub const SENSING_TYPE: &str = "SAS";
const CSP: &str = "sim-csp";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("service setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    DataPlane(#[from] DataPlaneError),
}

pub fn iad_name(i: u32) -> IadName {
    IadName::new(format!("IAD_{}", i + 1))
}

/// Each edge node covers exactly one area of its own.
pub fn node_area(iad: u32, node: u32) -> AreaId {
    AreaId::new(format!("IAD_{}/n{}", iad + 1, node))
}

/// The provisioned service: registry, control plane and data-plane state.
#[derive(Debug)]
pub struct Deployment {
    pub registry: Registry,
    pub control: ControlPlane,
    pub service: ServiceId,
    pub table: AreaTable,
    pub query_scheduler: QueryScheduler,
    pub iads: Vec<IadScheduler>,
}

/// Registers every IAD, sets the service up over all areas through the
/// control plane, and instantiates the granted pods as queue servers.
pub fn build_deployment(cfg: &SimConfig, policy: QueuePolicy) -> Result<Deployment, SimError> {
    let mut registry = Registry::new();
    let csp = CspAccount { id: CSP.into() };
    registry.register_csp(csp.clone())?;
    let catalog = vec![PodCatalogEntry {
        config_id: "default".into(),
        mean_exec_time: Micros::from_millis_f64(cfg.segments.exec_ms),
        resource_cost: 1.0,
    }];
    let mut sites = BTreeMap::new();
    let mut requested = BTreeSet::new();
    for i in 0..cfg.iad_count {
        let areas: BTreeSet<AreaId> = (0..cfg.nodes_per_iad).map(|j| node_area(i, j)).collect();
        requested.extend(areas.iter().cloned());
        let record = IadRecord {
            name: iad_name(i),
            address: format!("10.{}.{}.1", i / 256, i % 256),
            capabilities: vec![Capability { sensing_type: SENSING_TYPE.into(), areas }],
        };
        registry.register_iad(record.clone())?;
        let nodes = (0..cfg.nodes_per_iad)
            .map(|j| EdgeNodeSpec { id: NodeId(j), areas: [node_area(i, j)].into() })
            .collect();
        sites.insert(
            record.name.clone(),
            IadSite {
                record,
                nodes,
                catalog: catalog.clone(),
                pods_per_node: cfg.pods_per_node,
                willing: true,
            },
        );
    }
    let neg = cfg.negotiation;
    let template = RequirementTemplate {
        task_rate: neg.task_rate,
        task_budget: Micros::from_millis_f64(neg.task_budget_ms),
        percentile: Percentile::new(neg.percentile)
            .map_err(|e| SimError::Setup(e.to_string()))?,
    };
    let mut control = ControlPlane::new();
    let service =
        control.setup_service(&registry, &csp, &SENSING_TYPE.into(), &requested, &template, &sites)?;
    let instance = control.service(&service).expect("service just set up");
    if instance.data_members().count() != cfg.iad_count as usize {
        return Err(SimError::Setup(format!(
            "only {} of {} IADs joined the pool",
            instance.data_members().count(),
            cfg.iad_count
        )));
    }

    // dense keys: area (i, j) is key i * nodes + j
    let mut table = AreaTable::new();
    for i in 0..cfg.iad_count {
        for j in 0..cfg.nodes_per_iad {
            table.intern(&node_area(i, j));
        }
    }
    let slots: BTreeMap<IadName, IadSlot> =
        (0..cfg.iad_count).map(|i| (iad_name(i), IadSlot(i))).collect();
    let query_scheduler = QueryScheduler::from_instance(instance, &slots, &mut table);

    let prior = Micros::from_millis_f64(cfg.segments.unloaded_ms());
    let mut iads = Vec::with_capacity(cfg.iad_count as usize);
    for i in 0..cfg.iad_count {
        let alloc = control
            .allocation(&service, &iad_name(i))
            .ok_or_else(|| SimError::Setup(format!("{} has no allocation", iad_name(i))))?;
        let mut nodes = Vec::with_capacity(cfg.nodes_per_iad as usize);
        for j in 0..cfg.nodes_per_iad {
            let pods = alloc.servers.get(&NodeId(j)).copied().unwrap_or(0);
            let est = UnloadedEstimator::new(cfg.window, prior)
                .map_err(|e| SimError::Setup(e.to_string()))?;
            nodes.push(EdgeNodeState::new(NodeId(j), [node_area(i, j)].into(), policy, pods, est)?);
        }
        iads.push(IadScheduler::new(IadSlot(i), iad_name(i), nodes, &mut table));
    }
    Ok(Deployment { registry, control, service, table, query_scheduler, iads })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Arrival(u32),
    WarmupEnd,
    MeasureEnd,
    QueryReady(QueryId),
    TaskReady(QueryId, u32),
    PodFree(u32, u32),
    Return(SubtaskId),
    QueryDone(QueryId),
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    at: Micros,
    seq: u64,
    ev: Ev,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct InFlight {
    arrival: Arrival,
    tasks: Vec<Task>,
}

/// One post-warmup query, for the trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub query: u64,
    pub class: String,
    pub arrival_us: i64,
    pub finish_us: i64,
    pub query_fanout: u32,
    pub task_fanouts: Vec<u32>,
    pub deadline_misses: u32,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub policy: QueuePolicy,
    pub rate: f64,
    pub recorder: LatencyRecorder,
    /// Per-node queue statistics over `[warmup, duration]`, by IAD.
    pub node_stats: Vec<Vec<NodeStats>>,
    pub measured_span: Micros,
    pub trace: Vec<TraceRecord>,
    pub events: u64,
}

pub struct Simulation {
    cfg: SimConfig,
    policy: QueuePolicy,
    deployment: Deployment,
    workload: WorkloadGen,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: Micros,
    warmup: Micros,
    duration: Micros,
    ids: IdGen,
    next_query: u64,
    classes: Vec<QueryClass>,
    slos: Vec<QuerySlo>,
    queries: HashMap<QueryId, InFlight>,
    // each scheduler's next arrival, drawn one ahead
    parked: Vec<Option<Arrival>>,
    running: HashMap<SubtaskId, Subtask>,
    ledger: ForkJoinLedger,
    node_rngs: Vec<Vec<ChaCha8Rng>>,
    dispatch: Segment,
    exec: Segment,
    ret: Segment,
    recorder: LatencyRecorder,
    measured: Option<Vec<Vec<NodeStats>>>,
    trace: Option<Vec<TraceRecord>>,
    events: u64,
}

impl Simulation {
    pub fn new(cfg: &SimConfig, policy: QueuePolicy) -> Result<Self, SimError> {
        cfg.validate()?;
        let deployment = build_deployment(cfg, policy)?;
        let node_rngs = (0..cfg.iad_count)
            .map(|i| {
                (0..cfg.nodes_per_iad)
                    .map(|j| substream(cfg.seed, Purpose::SubtaskWork, i, j))
                    .collect()
            })
            .collect();
        let classes = cfg
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| QueryClass { id: i as u16, priority: c.group })
            .collect();
        let slos = cfg
            .classes
            .iter()
            .map(|c| {
                QuerySlo::new(c.percentile, Micros::from_millis_f64(c.slo_ms))
                    .map_err(|e| SimError::Setup(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let warmup = Micros::from_secs_f64(cfg.warmup_s);
        let half_comm = cfg.segments.comm_ms / 2.0;
        let mut sim = Simulation {
            policy,
            workload: WorkloadGen::new(cfg),
            heap: BinaryHeap::new(),
            seq: 0,
            now: Micros::ZERO,
            warmup,
            duration: Micros::from_secs_f64(cfg.duration_s),
            ids: IdGen::new(),
            next_query: 0,
            classes,
            slos,
            queries: HashMap::new(),
            parked: vec![None; cfg.schedulers() as usize],
            running: HashMap::new(),
            ledger: ForkJoinLedger::new(),
            node_rngs,
            dispatch: Segment::new(half_comm),
            exec: Segment::new(cfg.segments.exec_ms),
            ret: Segment::new(half_comm),
            recorder: LatencyRecorder::new(warmup, cfg.groups().into_iter().map(|g| g.0)),
            measured: None,
            trace: None,
            events: 0,
            deployment,
            cfg: cfg.clone(),
        };
        for s in 0..cfg.schedulers() {
            sim.park_next(s);
        }
        sim.push(warmup, Ev::WarmupEnd);
        sim.push(sim.duration, Ev::MeasureEnd);
        Ok(sim)
    }

    /// Keeps a per-query trace of post-warmup queries.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn policy(&self) -> QueuePolicy {
        self.policy
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn ledger(&self) -> &ForkJoinLedger {
        &self.ledger
    }

    pub fn recorder(&self) -> &LatencyRecorder {
        &self.recorder
    }

    /// No idle pod anywhere while its queue holds work.
    pub fn work_conserving(&self) -> bool {
        self.deployment.iads.iter().all(|iad| iad.nodes().iter().all(|n| n.is_work_conserving()))
    }

    fn push(&mut self, at: Micros, ev: Ev) {
        debug_assert!(at >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.heap.push(Scheduled { at, seq: self.seq, ev });
    }

    fn park_next(&mut self, s: u32) {
        let a = self.workload.next(s);
        if a.time < self.duration {
            self.push(a.time, Ev::Arrival(s));
            self.parked[s as usize] = Some(a);
        }
    }

    /// Processes the next event. Returns its time, or `None` when the run
    /// is over.
    pub fn step(&mut self) -> Result<Option<Micros>, SimError> {
        let Some(Scheduled { at, ev, .. }) = self.heap.pop() else {
            return Ok(None);
        };
        debug_assert!(at >= self.now);
        self.now = at;
        self.events += 1;
        match ev {
            Ev::Arrival(s) => self.on_arrival(s),
            Ev::WarmupEnd => {
                for iad in &mut self.deployment.iads {
                    for i in 0..iad.nodes().len() as u32 {
                        iad.node_mut(i).reset_stats(at);
                    }
                }
                Ok(())
            }
            Ev::MeasureEnd => {
                let snap = self
                    .deployment
                    .iads
                    .iter_mut()
                    .map(|iad| {
                        (0..iad.nodes().len() as u32)
                            .map(|i| {
                                iad.node_mut(i).observe(at);
                                iad.node(i).stats().clone()
                            })
                            .collect()
                    })
                    .collect();
                self.measured = Some(snap);
                Ok(())
            }
            Ev::QueryReady(q) => self.on_query_ready(q),
            Ev::TaskReady(q, i) => self.on_task_ready(q, i as usize),
            Ev::PodFree(iad, node) => {
                self.deployment.iads[iad as usize].node_mut(node).release_pod(at)?;
                self.start_work(iad, node);
                Ok(())
            }
            Ev::Return(id) => self.on_return(id),
            Ev::QueryDone(q) => self.on_query_done(q),
        }?;
        Ok(Some(at))
    }

    pub fn run(mut self) -> Result<RunOutcome, SimError> {
        while self.step()?.is_some() {}
        debug_assert!(self.ledger.conservation_holds());
        let span = self.duration - self.warmup;
        Ok(RunOutcome {
            policy: self.policy,
            rate: self.cfg.rate,
            recorder: self.recorder,
            node_stats: self.measured.unwrap_or_default(),
            measured_span: span,
            trace: self.trace.unwrap_or_default(),
            events: self.events,
        })
    }

    fn on_arrival(&mut self, s: u32) -> Result<(), SimError> {
        let arrival = self.parked[s as usize].take().expect("parked arrival");
        self.park_next(s);
        let id = QueryId(self.next_query);
        self.next_query += 1;
        let ready = self.now + arrival.query_eval;
        self.queries.insert(id, InFlight { arrival, tasks: Vec::new() });
        self.push(ready, Ev::QueryReady(id));
        Ok(())
    }

    fn on_query_ready(&mut self, id: QueryId) -> Result<(), SimError> {
        let nodes = self.cfg.nodes_per_iad;
        let inflight = self.queries.get_mut(&id).expect("known query");
        let a = &inflight.arrival;
        let areas: Vec<AreaKey> = a
            .targets
            .iter()
            .flat_map(|t| t.nodes.iter().map(move |&j| AreaKey(t.iad * nodes + j)))
            .collect();
        let query = Query {
            id,
            service: self.deployment.service.clone(),
            class: self.classes[a.class],
            areas,
            slo: self.slos[a.class],
            arrival: a.time,
            origin: IadSlot(a.scheduler),
        };
        let tasks = self.deployment.query_scheduler.schedule_query(&query, &mut self.ids)?;
        debug_assert_eq!(tasks.len(), a.targets.len());
        self.ledger.open_query(&query, &tasks);
        let evals = a.task_eval.clone();
        inflight.tasks = tasks;
        for (i, eval) in evals.into_iter().enumerate() {
            self.push(self.now + eval, Ev::TaskReady(id, i as u32));
        }
        Ok(())
    }

    fn on_task_ready(&mut self, id: QueryId, i: usize) -> Result<(), SimError> {
        let task = &self.queries[&id].tasks[i];
        let slot = task.target.0;
        let rngs = &mut self.node_rngs[slot as usize];
        let (dispatch, exec, ret) = (self.dispatch, self.exec, self.ret);
        let d = self.deployment.iads[slot as usize].schedule_task(task, self.now, &mut self.ids, |n| {
            let rng = &mut rngs[n as usize];
            SubtaskWork { dispatch: dispatch.draw(rng), exec: exec.draw(rng), ret: ret.draw(rng) }
        })?;
        self.ledger.task_dispatched(&d)?;
        for &n in &d.nodes {
            self.start_work(slot, n);
        }
        Ok(())
    }

    fn start_work(&mut self, iad: u32, node: u32) {
        let now = self.now;
        while let Some(s) = self.deployment.iads[iad as usize].node_mut(node).start_next(now) {
            let free = now + s.work.dispatch + s.work.exec;
            self.push(free, Ev::PodFree(iad, node));
            self.push(free + s.work.ret, Ev::Return(s.id));
            self.running.insert(s.id, s);
        }
    }

    fn on_return(&mut self, id: SubtaskId) -> Result<(), SimError> {
        let s = self.running.remove(&id).expect("running subtask");
        self.deployment.iads[s.iad.0 as usize].node_mut(s.node).complete_subtask(&s)?;
        if let Some(r) = self.ledger.subtask_completed(&s, self.now)? {
            if r.query_ready {
                let agg = self.queries[&r.query].arrival.aggregation;
                self.push(self.now + agg, Ev::QueryDone(r.query));
            }
        }
        Ok(())
    }

    fn on_query_done(&mut self, id: QueryId) -> Result<(), SimError> {
        let inflight = self.queries.remove(&id).expect("known query");
        let r: QueryResult = self.ledger.close_query(id, inflight.arrival.aggregation)?;
        debug_assert_eq!(r.finish, self.now);
        if self.recorder.record(&r) {
            if let Some(trace) = &mut self.trace {
                trace.push(TraceRecord {
                    query: id.0,
                    class: self.cfg.classes[inflight.arrival.class].name.clone(),
                    arrival_us: r.arrival.as_us(),
                    finish_us: r.finish.as_us(),
                    query_fanout: r.query_fanout(),
                    task_fanouts: r.task_fanouts.clone(),
                    deadline_misses: r.deadline_misses,
                });
            }
        }
        Ok(())
    }
}

/// Runs `cfg` once under `policy`.
pub fn run_simulation(cfg: &SimConfig, policy: QueuePolicy) -> Result<RunOutcome, SimError> {
    Simulation::new(cfg, policy)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::testbed;

    fn short(rate: f64) -> SimConfig {
        let mut c = testbed();
        c.rate = rate;
        c.warmup_s = 50.0;
        c.duration_s = 1_000.0;
        c
    }

    #[test]
    fn deployment_goes_through_the_control_plane() {
        let d = build_deployment(&testbed(), QueuePolicy::Edfq).unwrap();
        let svc = d.control.service(&d.service).unwrap();
        assert_eq!(svc.pool.len(), 4);
        assert_eq!(d.iads.len(), 4);
        assert!(d.iads.iter().all(|i| i.nodes().len() == 8 && i.nodes().iter().all(|n| n.pods() == 1)));
        assert_eq!(d.table.key(&node_area(2, 5)), Some(AreaKey(2 * 8 + 5)));
    }

    #[test]
    fn every_query_completes() {
        let out = run_simulation(&short(3.0), QueuePolicy::Edfq).unwrap();
        let total = out.recorder.completed() as u64 + out.recorder.pre_warmup;
        // ~3 q/s over 1000 s
        assert!((2_700..3_300).contains(&total), "{total}");
        assert!(out.recorder.groups().all(|(_, g)| g.failed == 0));
    }

    #[test]
    fn clock_never_runs_backwards_and_invariants_hold() {
        let mut sim = Simulation::new(&short(6.0), QueuePolicy::Spr).unwrap();
        let mut last = Micros::ZERO;
        while let Some(t) = sim.step().unwrap() {
            assert!(t >= last);
            last = t;
            assert!(sim.work_conserving());
            assert!(sim.ledger().conservation_holds());
        }
        assert_eq!(sim.ledger().open_queries(), 0);
        assert_eq!(sim.ledger().in_flight_subtasks(), 0);
    }

    #[test]
    fn lone_query_sees_no_queueing() {
        let mut c = short(0.001);
        c.warmup_s = 0.0;
        c.duration_s = 2_000.0;
        let out = Simulation::new(&c, QueuePolicy::Fifo).unwrap().with_trace().run().unwrap();
        for t in &out.trace {
            assert!(t.finish_us > t.arrival_us);
        }
        let waits: f64 = out.node_stats.iter().flatten().map(|s| s.total_wait_us).sum();
        assert_eq!(waits, 0.0);
    }
}
