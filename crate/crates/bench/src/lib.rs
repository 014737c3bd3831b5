//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use promises_core::catalog::InstanceDoc;
use promises_core::harness::{random_predicate, GRADES};
use promises_core::protocol::{EnvironmentMsg, PromiseRequestMsg, ReleaseOption};
use promises_core::{
    AvailabilityView, CatalogDocument, CatalogSchema, Envelope, InstanceStatus, Predicate,
    PromiseId, PropertyConstraint, PropertyDomain, ResourceCatalog, Scalar, TypeDecl,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A hotel of `rooms` rooms plus two pools.
pub fn hotel(rooms: usize, seed: u64) -> ResourceCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = TypeDecl::default()
        .with_property("floor", PropertyDomain::Int { min: Some(1), max: Some(20) })
        .with_property(
            "grade",
            PropertyDomain::Enum {
                values: GRADES.iter().map(|g| Scalar::from(*g)).collect(),
                ordered: true,
            },
        )
        .with_property("view", PropertyDomain::Bool);
    let types = CatalogSchema::new()
        .with_type("widget", TypeDecl::default())
        .with_type("cash", TypeDecl::default())
        .with_type("room", room);
    let mut pools = BTreeMap::new();
    pools.insert("widget".into(), 10_000);
    pools.insert("cash".into(), 10_000);
    let instances = (0..rooms)
        .map(|k| {
            let mut properties = BTreeMap::new();
            properties.insert("floor".to_string(), Scalar::Int(rng.gen_range(1..=20)));
            properties.insert("grade".to_string(), Scalar::from(GRADES[rng.gen_range(0..3)]));
            properties.insert("view".to_string(), Scalar::Bool(rng.gen_bool(0.4)));
            InstanceDoc {
                resource_type: "room".into(),
                key: format!("r{k:05}"),
                status: InstanceStatus::Available,
                properties,
            }
        })
        .collect();
    ResourceCatalog::from_document(CatalogDocument {
        types,
        pools,
        instances,
    })
    .expect("fixture catalog is valid")
}

pub fn view(rooms: usize, seed: u64) -> AvailabilityView {
    (*hotel(rooms, seed).snapshot_availability()).clone()
}

/// `n` room predicates that together need about half the rooms.
pub fn room_predicates(n: usize, rooms: usize, seed: u64) -> Vec<Predicate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = (rooms / (2 * n.max(1))).max(1) as u64;
    (0..n)
        .map(|i| match i % 3 {
            0 => Predicate::quantity("room", per),
            1 => Predicate::property(
                "room",
                vec![PropertyConstraint::at_least("floor", rng.gen_range(1..=5i64))],
                per,
            ),
            _ => Predicate::property(
                "room",
                vec![PropertyConstraint::at_least("grade", "basic")],
                per,
            ),
        })
        .collect()
}

/// Small mixed predicates for solver-versus-oracle comparisons.
pub fn small_predicates(n: usize, seed: u64) -> Vec<Predicate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_predicate(&mut rng)).collect()
}

/// A request-plus-action envelope of roughly realistic size.
pub fn envelope(predicates: usize) -> Envelope {
    let preds = room_predicates(predicates, 100, 1);
    Envelope::request(PromiseRequestMsg::new("req-1", preds, 60).releasing(vec![PromiseId(7)]))
        .with_action("book", serde_json::json!({"predicates": [{"quantity": {"resource-type": "room", "amount": 1}}]}))
        .with_environment(EnvironmentMsg::new([
            (PromiseId(7), ReleaseOption::ReleaseAfterSuccess),
            (PromiseId(9), ReleaseOption::Retain),
        ]))
}
