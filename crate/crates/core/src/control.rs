//! Service setup: discovery, negotiation, resource estimation and
//! provisioning, plus later pool changes.
//!
//! Negotiation is reduced to one feasibility predicate: the M/M/1 service
//! budget for the IAD's participating edge nodes must be met by some pod
//! configuration in the IAD's catalog.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{mm1_subtask_budget, pod_config_select, BudgetError, Mm1Requirement, PodCatalogEntry};
use crate::registry::{AreaId, CspAccount, IadName, IadRecord, Registry, RegistryError, SensingType};
use crate::units::{Micros, Percentile};

/// Negotiation rounds before setup gives up.
pub const MAX_NEGOTIATION_ROUNDS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("CSP account {0} is not registered")]
    UnknownCsp(String),
    #[error("service setup needs at least one area")]
    NoAreas,
    #[error("service setup failed: {0}")]
    SetupFailed(String),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("{0} is already in the pool of {1}")]
    DuplicateMember(IadName, ServiceId),
    #[error("{iad} declined to join: {reason}")]
    Rejected { iad: IadName, reason: RejectReason },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub String);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

/// An edge node inside an IAD and the areas its sensors cover. Only the
/// IAD itself sees these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeNodeSpec {
    pub id: NodeId,
    pub areas: BTreeSet<AreaId>,
}

/// The local control plane of one IAD: its edge nodes, what it can
/// provision, and whether it is willing to sell at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IadSite {
    pub record: IadRecord,
    pub nodes: Vec<EdgeNodeSpec>,
    pub catalog: Vec<PodCatalogEntry>,
    #[serde(default = "one")]
    pub pods_per_node: u32,
    #[serde(default = "yes")]
    pub willing: bool,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

impl IadSite {
    /// Nodes covering at least one of `areas`.
    pub fn participating_nodes(&self, areas: &BTreeSet<AreaId>) -> Vec<&EdgeNodeSpec> {
        self.nodes
            .iter()
            .filter(|n| n.areas.iter().any(|a| areas.contains(a)))
            .collect()
    }
}

/// `(lambda_t, x_bar, p_bar)` offered to every candidate; `n` is filled in
/// per IAD from its participating node count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequirementTemplate {
    pub task_rate: f64,
    pub task_budget: Micros,
    pub percentile: Percentile,
}

impl RequirementTemplate {
    pub fn for_nodes(&self, nodes: u32) -> Mm1Requirement {
        Mm1Requirement {
            task_rate: self.task_rate,
            task_budget: self.task_budget,
            percentile: self.percentile,
            nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Declined,
    NoParticipatingNodes,
    Infeasible(String),
    NoConfig,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Declined => f.write_str("declined"),
            RejectReason::NoParticipatingNodes => f.write_str("no participating edge nodes"),
            RejectReason::Infeasible(why) => write!(f, "infeasible: {why}"),
            RejectReason::NoConfig => f.write_str("no config"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NegotiationOutcome {
    Accepted {
        requirement: Mm1Requirement,
        service_budget: Micros,
        config: PodCatalogEntry,
    },
    Rejected {
        reason: RejectReason,
    },
}

impl NegotiationOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, NegotiationOutcome::Accepted { .. })
    }
}

/// Estimates `t_e` over the nodes of `site` that cover `areas` and picks the
/// cheapest pod configuration that meets it.
pub fn negotiate(
    site: &IadSite,
    sensing_type: &SensingType,
    areas: &BTreeSet<AreaId>,
    template: &RequirementTemplate,
) -> NegotiationOutcome {
    if !site.willing {
        return NegotiationOutcome::Rejected { reason: RejectReason::Declined };
    }
    let offered: BTreeSet<AreaId> =
        site.record.areas_for(sensing_type).intersection(areas).cloned().collect();
    let n = site.participating_nodes(&offered).len() as u32;
    if n == 0 {
        return NegotiationOutcome::Rejected { reason: RejectReason::NoParticipatingNodes };
    }
    let requirement = template.for_nodes(n);
    let service_budget = match mm1_subtask_budget(&requirement) {
        Ok(t_e) => t_e,
        Err(e) => {
            return NegotiationOutcome::Rejected { reason: RejectReason::Infeasible(e.to_string()) }
        }
    };
    match pod_config_select(service_budget, &site.catalog) {
        Ok(config) => NegotiationOutcome::Accepted { requirement, service_budget, config },
        Err(BudgetError::NoConfig(_)) => {
            NegotiationOutcome::Rejected { reason: RejectReason::NoConfig }
        }
        Err(e) => NegotiationOutcome::Rejected { reason: RejectReason::Infeasible(e.to_string()) },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMember {
    pub iad: IadName,
    pub address: String,
    /// `None` for scheduling-only members.
    pub requirement: Option<Mm1Requirement>,
    pub service_budget: Option<Micros>,
    pub config: Option<PodCatalogEntry>,
    pub granted_pods: BTreeMap<NodeId, u32>,
    pub covered_areas: BTreeSet<AreaId>,
}

impl PoolMember {
    pub fn is_scheduling_only(&self) -> bool {
        self.covered_areas.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub service_id: ServiceId,
    pub csp: String,
    pub sensing_type: SensingType,
    pub requested_areas: BTreeSet<AreaId>,
    pub pool: Vec<PoolMember>,
    /// Scheduling-only members, `m_s`.
    pub scheduling_only: u32,
    /// Set when the pool has no data-plane member left.
    pub degraded: bool,
    pub negotiation_rounds: u32,
}

impl ServiceInstance {
    pub fn member(&self, iad: &IadName) -> Option<&PoolMember> {
        self.pool.iter().find(|m| &m.iad == iad)
    }

    /// Data-plane members, `m`.
    pub fn data_members(&self) -> impl Iterator<Item = &PoolMember> {
        self.pool.iter().filter(|m| !m.is_scheduling_only())
    }
}

/// Pods instantiated on one IAD for one service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub iad: IadName,
    pub servers: BTreeMap<NodeId, u32>,
    /// Nothing was allocated.
    pub empty: bool,
}

impl AllocationReport {
    pub fn total_servers(&self) -> u32 {
        self.servers.values().sum()
    }
}

/// Drives service setup and owns every service instance and allocation.
#[derive(Debug, Default)]
pub struct ControlPlane {
    services: BTreeMap<ServiceId, ServiceInstance>,
    allocations: BTreeMap<(ServiceId, IadName), AllocationReport>,
    next_service: u64,
}

impl ControlPlane {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn service(&self, id: &ServiceId) -> Option<&ServiceInstance> {
        self.services.get(id)
    }

    pub fn allocation(&self, id: &ServiceId, iad: &IadName) -> Option<&AllocationReport> {
        self.allocations.get(&(id.clone(), iad.clone()))
    }

    fn member_for(
        site: &IadSite,
        sensing_type: &SensingType,
        areas: &BTreeSet<AreaId>,
        outcome: NegotiationOutcome,
    ) -> Result<PoolMember, RejectReason> {
        match outcome {
            NegotiationOutcome::Accepted { requirement, service_budget, config } => {
                let covered: BTreeSet<AreaId> =
                    site.record.areas_for(sensing_type).intersection(areas).cloned().collect();
                let granted_pods = site
                    .participating_nodes(&covered)
                    .into_iter()
                    .map(|n| (n.id, site.pods_per_node))
                    .collect();
                Ok(PoolMember {
                    iad: site.record.name.clone(),
                    address: site.record.address.clone(),
                    requirement: Some(requirement),
                    service_budget: Some(service_budget),
                    config: Some(config),
                    granted_pods,
                    covered_areas: covered,
                })
            }
            NegotiationOutcome::Rejected { reason } => Err(reason),
        }
    }

    /// Discover, negotiate, estimate and provision. Candidates that reject
    /// are dropped and the remainder renegotiated, for at most
    /// [`MAX_NEGOTIATION_ROUNDS`] rounds.
    pub fn setup_service(
        &mut self,
        registry: &Registry,
        csp: &CspAccount,
        sensing_type: &SensingType,
        areas: &BTreeSet<AreaId>,
        template: &RequirementTemplate,
        sites: &BTreeMap<IadName, IadSite>,
    ) -> Result<ServiceId, ControlError> {
        if registry.csp(&csp.id).is_none() {
            return Err(ControlError::UnknownCsp(csp.id.clone()));
        }
        if areas.is_empty() {
            return Err(ControlError::NoAreas);
        }
        let mut candidates: Vec<IadName> = registry
            .discover(sensing_type, areas)?
            .into_iter()
            .map(|r| r.name)
            .filter(|n| sites.contains_key(n))
            .collect();
        if candidates.is_empty() {
            return Err(ControlError::SetupFailed("discovery returned no candidates".into()));
        }

        let mut rounds = 0;
        let members = loop {
            rounds += 1;
            let mut accepted = Vec::new();
            let mut rejected = 0;
            for name in &candidates {
                let site = &sites[name];
                let outcome = negotiate(site, sensing_type, areas, template);
                match Self::member_for(site, sensing_type, areas, outcome) {
                    Ok(m) => accepted.push(m),
                    Err(reason) => {
                        log::info!("{name} rejected in round {rounds}: {reason}");
                        rejected += 1;
                    }
                }
            }
            if accepted.is_empty() {
                return Err(ControlError::SetupFailed("every candidate rejected".into()));
            }
            if rejected == 0 {
                break accepted;
            }
            if rounds >= MAX_NEGOTIATION_ROUNDS {
                return Err(ControlError::SetupFailed(format!(
                    "candidates still rejecting after {rounds} rounds"
                )));
            }
            candidates = accepted.into_iter().map(|m| m.iad).collect();
        };

        self.next_service += 1;
        let service_id = ServiceId(format!("{}-{}-{}", csp.id, sensing_type, self.next_service));
        let instance = ServiceInstance {
            service_id: service_id.clone(),
            csp: csp.id.clone(),
            sensing_type: sensing_type.clone(),
            requested_areas: areas.clone(),
            pool: members,
            scheduling_only: 0,
            degraded: false,
            negotiation_rounds: rounds,
        };
        for member in &instance.pool {
            self.provision(&service_id, member);
        }
        self.services.insert(service_id.clone(), instance);
        Ok(service_id)
    }

    /// Instantiates the member's granted pods. Repeated calls return the
    /// same allocation.
    pub fn provision(&mut self, service_id: &ServiceId, member: &PoolMember) -> AllocationReport {
        self.allocations
            .entry((service_id.clone(), member.iad.clone()))
            .or_insert_with(|| {
                let servers: BTreeMap<NodeId, u32> = member
                    .granted_pods
                    .iter()
                    .filter(|(_, &pods)| pods > 0)
                    .map(|(&n, &p)| (n, p))
                    .collect();
                if servers.is_empty() {
                    warn!("{} provisioned with no servers", member.iad);
                }
                AllocationReport { iad: member.iad.clone(), empty: servers.is_empty(), servers }
            })
            .clone()
    }

    fn service_mut(&mut self, id: &ServiceId) -> Result<&mut ServiceInstance, ControlError> {
        self.services.get_mut(id).ok_or_else(|| ControlError::UnknownService(id.clone()))
    }

    /// Negotiates with `site` and adds it to the pool if it accepts.
    pub fn add_iad(
        &mut self,
        service_id: &ServiceId,
        site: &IadSite,
        template: &RequirementTemplate,
    ) -> Result<AllocationReport, ControlError> {
        let instance = self.service_mut(service_id)?;
        if instance.member(&site.record.name).is_some() {
            return Err(ControlError::DuplicateMember(site.record.name.clone(), service_id.clone()));
        }
        let outcome = negotiate(site, &instance.sensing_type, &instance.requested_areas, template);
        let member =
            Self::member_for(site, &instance.sensing_type, &instance.requested_areas, outcome)
                .map_err(|reason| ControlError::Rejected { iad: site.record.name.clone(), reason })?;
        instance.pool.push(member.clone());
        instance.degraded = false;
        Ok(self.provision(service_id, &member))
    }

    /// Adds a member that only schedules queries and covers no area.
    pub fn add_scheduling_only(
        &mut self,
        service_id: &ServiceId,
        record: &IadRecord,
    ) -> Result<(), ControlError> {
        let instance = self.service_mut(service_id)?;
        if instance.member(&record.name).is_some() {
            return Err(ControlError::DuplicateMember(record.name.clone(), service_id.clone()));
        }
        instance.pool.push(PoolMember {
            iad: record.name.clone(),
            address: record.address.clone(),
            requirement: None,
            service_budget: None,
            config: None,
            granted_pods: BTreeMap::new(),
            covered_areas: BTreeSet::new(),
        });
        instance.scheduling_only += 1;
        Ok(())
    }

    /// Removes `iad` from the pool. Returns `false` (and logs) when it was
    /// not a member.
    pub fn remove_iad(&mut self, service_id: &ServiceId, iad: &IadName) -> Result<bool, ControlError> {
        let instance = self.service_mut(service_id)?;
        let Some(pos) = instance.pool.iter().position(|m| &m.iad == iad) else {
            warn!("{iad} is not a member of {service_id}; nothing removed");
            return Ok(false);
        };
        let member = instance.pool.remove(pos);
        if member.is_scheduling_only() {
            instance.scheduling_only -= 1;
        }
        if instance.data_members().next().is_none() {
            instance.degraded = true;
        }
        self.allocations.remove(&(service_id.clone(), iad.clone()));
        Ok(true)
    }
}
