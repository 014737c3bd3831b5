//! The promise table and promise checking.
//!
//! The engine never touches the catalog. Every decision is made against an
//! [`AvailabilityView`] handed in by the caller, and the table only changes
//! when the resulting set of active promises is still satisfiable against
//! that view. Callers serialize access; there is no internal locking.

mod feasibility;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::AvailabilityView;
use crate::predicate::{validate_predicate, InstanceId, Predicate, PredicateError, ResourceTypeId};

pub use feasibility::{check_satisfiable, Assignment, FeasibilityProblem, Supply, SupplyUnit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromiseId(pub u64);

impl fmt::Display for PromiseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromiseStatus {
    Active,
    Released,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PromiseRecord {
    pub id: PromiseId,
    pub predicates: Vec<Predicate>,
    pub granted_at: u64,
    pub expires_at: u64,
    pub status: PromiseStatus,
}

impl PromiseRecord {
    pub fn is_active(&self) -> bool {
        self.status == PromiseStatus::Active
    }
}

/// Every promise granted during the manager's lifetime, keyed by id.
/// Released and expired records are kept for diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromiseTable {
    records: BTreeMap<PromiseId, PromiseRecord>,
}

impl PromiseTable {
    pub fn get(&self, id: PromiseId) -> Option<&PromiseRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &PromiseRecord> {
        self.records.values()
    }

    pub fn active(&self) -> impl Iterator<Item = &PromiseRecord> {
        self.records.values().filter(|r| r.is_active())
    }

    pub fn active_predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.active().flat_map(|r| r.predicates.iter())
    }

    /// Active predicates, skipping promises listed in `excluded`.
    pub fn active_predicates_except<'a>(
        &'a self,
        excluded: &'a [PromiseId],
    ) -> impl Iterator<Item = &'a Predicate> + 'a {
        self.active()
            .filter(move |r| !excluded.contains(&r.id))
            .flat_map(|r| r.predicates.iter())
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Instances referenced by an active Named predicate.
    pub fn named_instances(&self) -> BTreeSet<InstanceId> {
        self.active_predicates()
            .filter_map(|p| match p {
                Predicate::Named { instance } => Some(instance.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.dump()).expect("table always serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn dump(&self) -> TableDump {
        TableDump {
            promises: self.records.values().cloned().collect(),
        }
    }

    /// Instances claimed by more than one active promise. Empty when the
    /// exclusivity invariant holds.
    pub fn named_exclusivity_violations(&self) -> Vec<InstanceId> {
        let mut owner: BTreeMap<&InstanceId, PromiseId> = BTreeMap::new();
        let mut bad = BTreeSet::new();
        for r in self.active() {
            for p in &r.predicates {
                if let Predicate::Named { instance } = p {
                    if let Some(prev) = owner.insert(instance, r.id) {
                        if prev != r.id {
                            bad.insert(instance.clone());
                        }
                    }
                }
            }
        }
        bad.into_iter().collect()
    }

    /// Pure pools whose promised quantity exceeds the quantity on hand.
    pub fn pool_additivity_violations(&self, view: &AvailabilityView) -> Vec<(ResourceTypeId, u64, u64)> {
        let mut promised: BTreeMap<&ResourceTypeId, u64> = BTreeMap::new();
        for p in self.active_predicates() {
            if let Predicate::Quantity {
                resource_type,
                amount,
            } = p
            {
                if view.is_pure_pool(resource_type) {
                    *promised.entry(resource_type).or_default() += amount;
                }
            }
        }
        promised
            .into_iter()
            .filter_map(|(ty, sum)| {
                let on_hand = view.quantity_on_hand(ty).unwrap_or(0);
                (sum > on_hand).then(|| (ty.clone(), sum, on_hand))
            })
            .collect()
    }
}

/// Diagnostic listing of the promise table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDump {
    pub promises: Vec<PromiseRecord>,
}

/// Why a grant or exchange was turned down. A protocol-level outcome, not a
/// fault.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("requested predicates cannot be satisfied together with existing promises")]
    Unsatisfiable,
    #[error("promise duration must be positive")]
    ZeroDuration,
    #[error("request carries no predicates")]
    EmptyRequest,
    #[error("invalid predicate: {0}")]
    Invalid(#[from] PredicateError),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PromiseError {
    #[error("unknown promise {0}")]
    UnknownPromise(PromiseId),
    #[error("promise {0} is no longer active")]
    NotActive(PromiseId),
    #[error(transparent)]
    Rejected(#[from] Rejection),
}

/// Outcome of [`PromiseEngine::post_action_check`] when the remaining
/// promises can no longer all be honoured.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("action left active promises unsatisfiable")]
pub struct Violation;

#[derive(Debug, Default)]
pub struct PromiseEngine {
    table: PromiseTable,
    next_id: u64,
}

impl PromiseEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn table(&self) -> &PromiseTable {
        &self.table
    }

    /// Replaces the table wholesale, e.g. to undo a failed request. The id
    /// counter is not rewound, so ids are never reissued.
    pub fn restore_table(&mut self, table: PromiseTable) {
        self.table = table;
    }

    /// Grants a promise covering all of `predicates`, or nothing.
    pub fn grant(
        &mut self,
        predicates: Vec<Predicate>,
        duration: u64,
        now: u64,
        view: &AvailabilityView,
    ) -> Result<PromiseRecord, Rejection> {
        if predicates.is_empty() {
            return Err(Rejection::EmptyRequest);
        }
        self.admit(predicates, duration, now, view, &[])
    }

    /// Marks each id released. Fails without changing anything if any id is
    /// unknown. Releasing a promise that is already released or expired is
    /// a no-op.
    pub fn release(&mut self, ids: &[PromiseId]) -> Result<(), PromiseError> {
        if let Some(missing) = ids.iter().find(|id| !self.table.records.contains_key(id)) {
            return Err(PromiseError::UnknownPromise(*missing));
        }
        for id in ids {
            let rec = self.table.records.get_mut(id).expect("checked above");
            if rec.is_active() {
                rec.status = PromiseStatus::Released;
            }
        }
        Ok(())
    }

    /// Atomically releases `release` and grants `predicates`. Feasibility is
    /// judged as if the released promises were already gone; on rejection the
    /// old promises stay in force. An empty `predicates` list degenerates to
    /// a plain release and yields `Ok(None)`.
    pub fn exchange(
        &mut self,
        predicates: Vec<Predicate>,
        duration: u64,
        release: &[PromiseId],
        now: u64,
        view: &AvailabilityView,
    ) -> Result<Option<PromiseRecord>, PromiseError> {
        for id in release {
            match self.table.get(*id) {
                None => return Err(PromiseError::UnknownPromise(*id)),
                Some(r) if !r.is_active() => return Err(PromiseError::NotActive(*id)),
                Some(_) => {}
            }
        }
        if predicates.is_empty() {
            if release.is_empty() {
                return Err(Rejection::EmptyRequest.into());
            }
            self.release(release)?;
            return Ok(None);
        }
        let record = self.admit(predicates, duration, now, view, release)?;
        self.release(release)?;
        Ok(Some(record))
    }

    /// Expires every active promise with `expires_at <= now`.
    pub fn expire_sweep(&mut self, now: u64) -> Vec<PromiseId> {
        let mut expired = Vec::new();
        for rec in self.table.records.values_mut() {
            if rec.is_active() && rec.expires_at <= now {
                rec.status = PromiseStatus::Expired;
                expired.push(rec.id);
            }
        }
        expired
    }

    /// Re-checks the active promises, minus `released`, against the state an
    /// action left behind.
    pub fn post_action_check(
        &self,
        released: &[PromiseId],
        view: &AvailabilityView,
    ) -> Result<(), Violation> {
        if check_satisfiable(self.table.active_predicates_except(released), view) {
            Ok(())
        } else {
            Err(Violation)
        }
    }

    pub fn is_consistent(&self, view: &AvailabilityView) -> bool {
        check_satisfiable(self.table.active_predicates(), view)
    }

    fn admit(
        &mut self,
        predicates: Vec<Predicate>,
        duration: u64,
        now: u64,
        view: &AvailabilityView,
        releasing: &[PromiseId],
    ) -> Result<PromiseRecord, Rejection> {
        if duration == 0 {
            return Err(Rejection::ZeroDuration);
        }
        for p in &predicates {
            validate_predicate(p, view.schema())?;
        }
        let combined = self
            .table
            .active_predicates_except(releasing)
            .chain(predicates.iter());
        if !check_satisfiable(combined, view) {
            return Err(Rejection::Unsatisfiable);
        }
        let id = PromiseId(self.next_id);
        self.next_id += 1;
        let record = PromiseRecord {
            id,
            predicates,
            granted_at: now,
            expires_at: now.saturating_add(duration),
            status: PromiseStatus::Active,
        };
        self.table.records.insert(id, record.clone());
        Ok(record)
    }
}

#[cfg(test)]
mod tests;
