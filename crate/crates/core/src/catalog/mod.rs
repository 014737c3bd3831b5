//! The resource manager: pools, named instances, and their availability.
//!
//! All changes go through a mutation unit. A unit records an undo entry for
//! every mutation it applies, so rolling back replays the log in reverse and
//! restores the exact pre-unit state. Readers that need a stable picture use
//! [`ResourceCatalog::snapshot_availability`], which only ever reflects
//! committed state.
//!
//! A resource type is either a *pure pool* (only a count is stored) or an
//! *instance type* (individual records are stored and the pool count is the
//! number of `available` instances).

mod document;
mod schema;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::predicate::{InstanceId, ResourceTypeId, Scalar};

pub use document::{CatalogDocument, InstanceDoc};
pub use schema::{CatalogSchema, PropertyDomain, TypeDecl};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceStatus {
    Available,
    Promised,
    Taken,
}

impl InstanceStatus {
    /// The permitted transitions: available→promised→taken, promised→available,
    /// available→taken.
    pub fn can_become(self, next: InstanceStatus) -> bool {
        use InstanceStatus::*;
        matches!(
            (self, next),
            (Available, Promised) | (Promised, Taken) | (Promised, Available) | (Available, Taken)
        )
    }
}

impl fmt::Display for InstanceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstanceStatus::Available => "available",
            InstanceStatus::Promised => "promised",
            InstanceStatus::Taken => "taken",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub properties: BTreeMap<String, Scalar>,
    pub status: InstanceStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PoolRecord {
    pub resource_type: ResourceTypeId,
    pub quantity_on_hand: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[serde(rename_all = "kebab-case")]
    DecrementPool {
        resource_type: ResourceTypeId,
        amount: u64,
    },
    #[serde(rename_all = "kebab-case")]
    IncrementPool {
        resource_type: ResourceTypeId,
        amount: u64,
    },
    #[serde(rename_all = "kebab-case")]
    SetInstanceStatus {
        instance: InstanceId,
        status: InstanceStatus,
    },
    #[serde(rename_all = "kebab-case")]
    SetProperty {
        instance: InstanceId,
        property: String,
        value: Scalar,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("catalog document does not parse: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("pool `{resource_type}` holds {on_hand}, cannot remove {amount}")]
    PoolUnderflow {
        resource_type: ResourceTypeId,
        on_hand: u64,
        amount: u64,
    },
    #[error("pool `{0}` would overflow")]
    PoolOverflow(ResourceTypeId),
    #[error("instance {instance} cannot go from {from} to {to}")]
    IllegalStatusTransition {
        instance: InstanceId,
        from: InstanceStatus,
        to: InstanceStatus,
    },
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("`{0}` is an instance type; its count is derived from instance status")]
    NotAPool(ResourceTypeId),
    #[error("a mutation unit is already active")]
    UnitActive,
    #[error("token does not belong to the active unit")]
    StaleUnit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum UndoEntry {
    Pool {
        resource_type: ResourceTypeId,
        previous: u64,
    },
    Status {
        instance: InstanceId,
        previous: InstanceStatus,
    },
    Property {
        instance: InstanceId,
        property: String,
        previous: Option<Scalar>,
    },
}

/// Inverse mutations recorded by the active unit, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UndoLog(Vec<UndoEntry>);

impl UndoLog {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Handle to the active mutation unit. Deliberately not `Clone`.
#[derive(Debug, PartialEq, Eq)]
pub struct UnitToken(u64);

/// Position in the active unit's undo log, for partial rollback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Savepoint(usize);

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct CatalogState {
    pools: BTreeMap<ResourceTypeId, u64>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
}

/// Point-in-time availability: pure pool counts plus every instance record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailabilityView {
    schema: Arc<CatalogSchema>,
    pools: BTreeMap<ResourceTypeId, u64>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
}

impl AvailabilityView {
    pub fn new(
        schema: Arc<CatalogSchema>,
        pools: BTreeMap<ResourceTypeId, u64>,
        instances: impl IntoIterator<Item = InstanceRecord>,
    ) -> Self {
        Self {
            schema,
            pools,
            instances: instances.into_iter().map(|r| (r.id.clone(), r)).collect(),
        }
    }

    pub fn schema(&self) -> &CatalogSchema {
        &self.schema
    }

    pub fn is_pure_pool(&self, ty: &ResourceTypeId) -> bool {
        self.pools.contains_key(ty)
    }

    /// Stored count for pure pools; number of `available` instances for
    /// instance types; `None` for types with neither.
    pub fn quantity_on_hand(&self, ty: &ResourceTypeId) -> Option<u64> {
        if let Some(n) = self.pools.get(ty) {
            return Some(*n);
        }
        let mut any = false;
        let mut n = 0;
        for r in self.instances_of(ty) {
            any = true;
            if r.status == InstanceStatus::Available {
                n += 1;
            }
        }
        any.then_some(n)
    }

    pub fn pools(&self) -> impl Iterator<Item = PoolRecord> + '_ {
        self.pools.iter().map(|(t, n)| PoolRecord {
            resource_type: t.clone(),
            quantity_on_hand: *n,
        })
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&InstanceRecord> {
        self.instances.get(id)
    }

    /// All instance records in lexicographic id order.
    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instances_of<'a>(
        &'a self,
        ty: &'a ResourceTypeId,
    ) -> impl Iterator<Item = &'a InstanceRecord> + 'a {
        let start = InstanceId {
            resource_type: ty.clone(),
            key: String::new(),
        };
        self.instances
            .range(start..)
            .map(|(_, r)| r)
            .take_while(move |r| &r.id.resource_type == ty)
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }
}

struct ActiveUnit {
    id: u64,
    undo: UndoLog,
}

pub struct ResourceCatalog {
    schema: Arc<CatalogSchema>,
    state: CatalogState,
    committed: Arc<AvailabilityView>,
    unit: Option<ActiveUnit>,
    next_unit: u64,
}

impl fmt::Debug for ResourceCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResourceCatalog")
            .field("pools", &self.state.pools)
            .field("instances", &self.state.instances.len())
            .field("unit_active", &self.unit.is_some())
            .finish()
    }
}

impl ResourceCatalog {
    /// Parses a TOML catalog document.
    pub fn load_catalog(text: &str) -> Result<Self, CatalogError> {
        let doc: CatalogDocument =
            toml::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: CatalogDocument) -> Result<Self, CatalogError> {
        let (schema, pools, instances) = doc.into_parts()?;
        let state = CatalogState { pools, instances };
        let schema = Arc::new(schema);
        let committed = Arc::new(Self::view_of(&schema, &state));
        Ok(Self {
            schema,
            state,
            committed,
            unit: None,
            next_unit: 0,
        })
    }

    pub fn to_document(&self) -> CatalogDocument {
        CatalogDocument::from_parts(&self.schema, &self.state.pools, &self.state.instances)
    }

    pub fn schema(&self) -> &CatalogSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<CatalogSchema> {
        Arc::clone(&self.schema)
    }

    /// Committed state only; mutations of an open unit are not visible.
    pub fn snapshot_availability(&self) -> Arc<AvailabilityView> {
        Arc::clone(&self.committed)
    }

    /// The working state of the active unit, including uncommitted mutations.
    pub fn unit_view(&self, token: &UnitToken) -> Result<AvailabilityView, CatalogError> {
        self.check_token(token)?;
        Ok(Self::view_of(&self.schema, &self.state))
    }

    pub fn begin_unit(&mut self) -> Result<UnitToken, CatalogError> {
        if self.unit.is_some() {
            return Err(CatalogError::UnitActive);
        }
        let id = self.next_unit;
        self.next_unit += 1;
        self.unit = Some(ActiveUnit {
            id,
            undo: UndoLog::default(),
        });
        Ok(UnitToken(id))
    }

    /// Applies one mutation inside the active unit. A failed mutation leaves
    /// the state untouched; the caller decides whether to abort the unit.
    pub fn apply_mutation(&mut self, token: &UnitToken, m: Mutation) -> Result<(), CatalogError> {
        self.check_token(token)?;
        let entry = match m {
            Mutation::DecrementPool {
                resource_type,
                amount,
            } => {
                let on_hand = self.pool_mut(&resource_type)?;
                let previous = *on_hand;
                *on_hand = previous
                    .checked_sub(amount)
                    .ok_or_else(|| CatalogError::PoolUnderflow {
                        resource_type: resource_type.clone(),
                        on_hand: previous,
                        amount,
                    })?;
                UndoEntry::Pool {
                    resource_type,
                    previous,
                }
            }
            Mutation::IncrementPool {
                resource_type,
                amount,
            } => {
                let on_hand = self.pool_mut(&resource_type)?;
                let previous = *on_hand;
                *on_hand = previous
                    .checked_add(amount)
                    .ok_or_else(|| CatalogError::PoolOverflow(resource_type.clone()))?;
                UndoEntry::Pool {
                    resource_type,
                    previous,
                }
            }
            Mutation::SetInstanceStatus { instance, status } => {
                let rec = self
                    .state
                    .instances
                    .get_mut(&instance)
                    .ok_or_else(|| CatalogError::UnknownResource(instance.to_string()))?;
                let previous = rec.status;
                if !previous.can_become(status) {
                    return Err(CatalogError::IllegalStatusTransition {
                        instance,
                        from: previous,
                        to: status,
                    });
                }
                rec.status = status;
                UndoEntry::Status { instance, previous }
            }
            Mutation::SetProperty {
                instance,
                property,
                value,
            } => {
                let domain = self
                    .schema
                    .property(&instance.resource_type, &property)
                    .ok_or_else(|| {
                        CatalogError::SchemaViolation(format!(
                            "{} has no property `{property}`",
                            instance.resource_type
                        ))
                    })?;
                if !domain.contains(&value) {
                    return Err(CatalogError::SchemaViolation(format!(
                        "{value} is outside the domain of {}.{property}",
                        instance.resource_type
                    )));
                }
                let rec = self
                    .state
                    .instances
                    .get_mut(&instance)
                    .ok_or_else(|| CatalogError::UnknownResource(instance.to_string()))?;
                let previous = rec.properties.insert(property.clone(), value);
                UndoEntry::Property {
                    instance,
                    property,
                    previous,
                }
            }
        };
        self.unit
            .as_mut()
            .expect("token checked above")
            .undo
            .0
            .push(entry);
        Ok(())
    }

    pub fn savepoint(&self, token: &UnitToken) -> Result<Savepoint, CatalogError> {
        self.check_token(token)?;
        Ok(Savepoint(self.unit.as_ref().map_or(0, |u| u.undo.len())))
    }

    /// Undoes every mutation applied after `sp`; the unit stays open.
    pub fn rollback_to(&mut self, token: &UnitToken, sp: Savepoint) -> Result<(), CatalogError> {
        self.check_token(token)?;
        let mut unit = self.unit.take().expect("token checked above");
        while unit.undo.len() > sp.0 {
            let entry = unit.undo.0.pop().expect("length checked");
            self.undo(entry);
        }
        self.unit = Some(unit);
        Ok(())
    }

    pub fn commit_unit(&mut self, token: UnitToken) -> Result<(), CatalogError> {
        self.check_token(&token)?;
        let unit = self.unit.take().expect("token checked above");
        if !unit.undo.is_empty() {
            self.committed = Arc::new(Self::view_of(&self.schema, &self.state));
        }
        Ok(())
    }

    pub fn rollback_unit(&mut self, token: UnitToken) -> Result<(), CatalogError> {
        self.rollback_to(&token, Savepoint(0))?;
        self.unit = None;
        Ok(())
    }

    pub fn has_active_unit(&self) -> bool {
        self.unit.is_some()
    }

    /// SHA-256 over the full current state (pools, instance properties and
    /// statuses), hex encoded.
    pub fn state_digest(&self) -> String {
        let records: Vec<&InstanceRecord> = self.state.instances.values().collect();
        let bytes = serde_json::to_vec(&(&self.state.pools, records))
            .expect("catalog state always serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn check_token(&self, token: &UnitToken) -> Result<(), CatalogError> {
        match &self.unit {
            Some(u) if u.id == token.0 => Ok(()),
            _ => Err(CatalogError::StaleUnit),
        }
    }

    fn pool_mut(&mut self, ty: &ResourceTypeId) -> Result<&mut u64, CatalogError> {
        if let Some(n) = self.state.pools.get_mut(ty) {
            return Ok(n);
        }
        if self.schema.get(ty).is_some() {
            Err(CatalogError::NotAPool(ty.clone()))
        } else {
            Err(CatalogError::UnknownResource(ty.to_string()))
        }
    }

    fn undo(&mut self, entry: UndoEntry) {
        match entry {
            UndoEntry::Pool {
                resource_type,
                previous,
            } => {
                self.state.pools.insert(resource_type, previous);
            }
            UndoEntry::Status { instance, previous } => {
                if let Some(r) = self.state.instances.get_mut(&instance) {
                    r.status = previous;
                }
            }
            UndoEntry::Property {
                instance,
                property,
                previous,
            } => {
                if let Some(r) = self.state.instances.get_mut(&instance) {
                    match previous {
                        Some(v) => r.properties.insert(property, v),
                        None => r.properties.remove(&property),
                    };
                }
            }
        }
    }

    fn view_of(schema: &Arc<CatalogSchema>, state: &CatalogState) -> AvailabilityView {
        AvailabilityView {
            schema: Arc::clone(schema),
            pools: state.pools.clone(),
            instances: state.instances.clone(),
        }
    }
}
