//! Registration service: IAD and CSP bookkeeping plus capability and
//! coverage discovery.
//!
//! Discovery is `1 + k` hash lookups: one for the sensing type, then one per
//! requested area. Every capable IAD covering at least one requested area is
//! returned, so the union of returned coverage is maximal.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("IAD {0} is already registered")]
    DuplicateIad(IadName),
    #[error("CSP account {0} already exists")]
    DuplicateCsp(String),
    #[error("IAD {0} is not registered")]
    UnknownIad(IadName),
    #[error("IAD record {0} has no capabilities")]
    NoCapabilities(IadName),
    #[error("empty identifier")]
    EmptyIdentifier,
    #[error("discovery needs at least one area")]
    NoAreas,
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Opaque name of a disjoint coverage area, e.g. `Beta.downtown`.
    AreaId
);
string_id!(IadName);
string_id!(SensingType);

/// One sensing capability and the areas it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub sensing_type: SensingType,
    pub areas: BTreeSet<AreaId>,
}

/// `{IAD name, address, capabilities and the areas they cover}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IadRecord {
    pub name: IadName,
    pub address: String,
    pub capabilities: Vec<Capability>,
}

impl IadRecord {
    pub fn areas_for(&self, sensing_type: &SensingType) -> BTreeSet<AreaId> {
        self.capabilities
            .iter()
            .filter(|c| &c.sensing_type == sensing_type)
            .flat_map(|c| c.areas.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CspAccount {
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegistrationId(pub u64);

/// Serializable registry contents.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    #[serde(default)]
    pub iads: Vec<IadRecord>,
    #[serde(default)]
    pub csps: Vec<CspAccount>,
}

#[derive(Debug, Default)]
pub struct Registry {
    next_id: u64,
    iads: BTreeMap<IadName, (RegistrationId, IadRecord)>,
    csps: BTreeMap<String, RegistrationId>,
    // sensing type -> area -> capable IADs
    index: HashMap<SensingType, HashMap<AreaId, BTreeSet<IadName>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshot(snapshot: RegistrySnapshot) -> Result<Self, RegistryError> {
        let mut reg = Registry::new();
        for csp in snapshot.csps {
            reg.register_csp(csp)?;
        }
        for iad in snapshot.iads {
            reg.register_iad(iad)?;
        }
        Ok(reg)
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot {
            iads: self.iads.values().map(|(_, r)| r.clone()).collect(),
            csps: self.csps.keys().map(|id| CspAccount { id: id.clone() }).collect(),
        }
    }

    fn issue_id(&mut self) -> RegistrationId {
        self.next_id += 1;
        RegistrationId(self.next_id)
    }

    pub fn register_iad(&mut self, record: IadRecord) -> Result<RegistrationId, RegistryError> {
        if record.name.0.is_empty() {
            return Err(RegistryError::EmptyIdentifier);
        }
        if self.iads.contains_key(&record.name) {
            return Err(RegistryError::DuplicateIad(record.name));
        }
        if record.capabilities.iter().all(|c| c.areas.is_empty()) {
            return Err(RegistryError::NoCapabilities(record.name));
        }
        for cap in &record.capabilities {
            let by_area = self.index.entry(cap.sensing_type.clone()).or_default();
            for area in &cap.areas {
                by_area.entry(area.clone()).or_default().insert(record.name.clone());
            }
        }
        let id = self.issue_id();
        self.iads.insert(record.name.clone(), (id, record));
        Ok(id)
    }

    pub fn deregister_iad(&mut self, name: &IadName) -> Result<IadRecord, RegistryError> {
        let (_, record) = self
            .iads
            .remove(name)
            .ok_or_else(|| RegistryError::UnknownIad(name.clone()))?;
        for cap in &record.capabilities {
            if let Some(by_area) = self.index.get_mut(&cap.sensing_type) {
                for area in &cap.areas {
                    if let Some(set) = by_area.get_mut(area) {
                        set.remove(name);
                        if set.is_empty() {
                            by_area.remove(area);
                        }
                    }
                }
            }
        }
        Ok(record)
    }

    pub fn register_csp(&mut self, account: CspAccount) -> Result<RegistrationId, RegistryError> {
        if account.id.is_empty() {
            return Err(RegistryError::EmptyIdentifier);
        }
        if self.csps.contains_key(&account.id) {
            return Err(RegistryError::DuplicateCsp(account.id));
        }
        let id = self.issue_id();
        self.csps.insert(account.id, id);
        Ok(id)
    }

    pub fn csp(&self, id: &str) -> Option<RegistrationId> {
        self.csps.get(id).copied()
    }

    pub fn iad(&self, name: &IadName) -> Option<&IadRecord> {
        self.iads.get(name).map(|(_, r)| r)
    }

    pub fn iad_count(&self) -> usize {
        self.iads.len()
    }

    /// Names of every IAD offering `sensing_type` on at least one of `areas`.
    pub fn match_iads<'a, I>(&self, sensing_type: &SensingType, areas: I) -> BTreeSet<IadName>
    where
        I: IntoIterator<Item = &'a AreaId>,
    {
        let mut out = BTreeSet::new();
        let Some(by_area) = self.index.get(sensing_type) else {
            return out;
        };
        for area in areas {
            if let Some(names) = by_area.get(area) {
                out.extend(names.iter().cloned());
            }
        }
        out
    }

    /// Matches, then retrieves the full records in name order. An unknown
    /// sensing type yields an empty list.
    pub fn discover(
        &self,
        sensing_type: &SensingType,
        areas: &BTreeSet<AreaId>,
    ) -> Result<Vec<IadRecord>, RegistryError> {
        if areas.is_empty() {
            return Err(RegistryError::NoAreas);
        }
        Ok(self
            .match_iads(sensing_type, areas)
            .iter()
            .filter_map(|name| self.iad(name).cloned())
            .collect())
    }
}
