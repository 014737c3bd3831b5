//! Exhaustive reference for the feasibility check.
//!
//! Enumerates every way of handing out supply units to predicates. It shares
//! nothing with the flow solver beyond [`satisfies`], and is only practical
//! for small catalogs (a handful of instances and predicates); the fuzz
//! harness and the tests use it as ground truth.

use std::collections::BTreeMap;

use crate::catalog::{AvailabilityView, InstanceStatus};
use crate::predicate::{satisfies, Predicate};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Unit {
    Pool(String),
    Instance(String, String),
}

pub fn exhaustive_satisfiable(predicates: &[Predicate], view: &AvailabilityView) -> bool {
    let mut capacity: BTreeMap<Unit, u64> = BTreeMap::new();
    for pool in view.pools() {
        capacity.insert(
            Unit::Pool(pool.resource_type.as_str().to_owned()),
            pool.quantity_on_hand,
        );
    }
    for rec in view.instances() {
        if rec.status != InstanceStatus::Taken {
            capacity.insert(
                Unit::Instance(rec.id.resource_type.as_str().to_owned(), rec.id.key.clone()),
                1,
            );
        }
    }
    let units: Vec<Unit> = capacity.keys().cloned().collect();
    let mut remaining: Vec<u64> = capacity.values().copied().collect();

    let options: Vec<Vec<usize>> = predicates
        .iter()
        .map(|p| {
            units
                .iter()
                .enumerate()
                .filter(|(_, u)| compatible(p, u, view))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let wants: Vec<u64> = predicates.iter().map(Predicate::amount).collect();
    assign(0, &wants, &options, &mut remaining)
}

fn compatible(p: &Predicate, unit: &Unit, view: &AvailabilityView) -> bool {
    match (p, unit) {
        (Predicate::Quantity { resource_type, .. }, Unit::Pool(ty)) => resource_type.as_str() == ty,
        (Predicate::Quantity { resource_type, .. }, Unit::Instance(ty, _)) => {
            resource_type.as_str() == ty
        }
        (_, Unit::Pool(_)) => false,
        (p, Unit::Instance(ty, key)) => view
            .instances()
            .find(|r| r.id.resource_type.as_str() == ty && &r.id.key == key)
            .is_some_and(|r| satisfies(r, p, view.schema()).unwrap_or(false)),
    }
}

fn assign(pred: usize, wants: &[u64], options: &[Vec<usize>], remaining: &mut [u64]) -> bool {
    if pred == wants.len() {
        return true;
    }
    spread(pred, 0, wants[pred], wants, options, remaining)
}

/// Tries every split of `need` units of predicate `pred` over its options
/// from index `opt` onward.
fn spread(
    pred: usize,
    opt: usize,
    need: u64,
    wants: &[u64],
    options: &[Vec<usize>],
    remaining: &mut [u64],
) -> bool {
    if need == 0 {
        return assign(pred + 1, wants, options, remaining);
    }
    let opts = &options[pred];
    if opt == opts.len() {
        return false;
    }
    let reachable: u64 = opts[opt..].iter().map(|&u| remaining[u]).sum();
    if reachable < need {
        return false;
    }
    let unit = opts[opt];
    let most = remaining[unit].min(need);
    for take in (0..=most).rev() {
        remaining[unit] -= take;
        let ok = spread(pred, opt + 1, need - take, wants, options, remaining);
        remaining[unit] += take;
        if ok {
            return true;
        }
    }
    false
}
