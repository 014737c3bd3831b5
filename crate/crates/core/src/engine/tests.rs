use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::oracle::exhaustive_satisfiable;
use super::*;
use crate::catalog::{
    CatalogSchema, InstanceRecord, InstanceStatus, PropertyDomain, ResourceCatalog, TypeDecl,
};
use crate::predicate::{PropertyConstraint, Scalar};

fn view_of(doc: &str) -> Arc<AvailabilityView> {
    ResourceCatalog::load_catalog(doc).unwrap().snapshot_availability()
}

fn pool(n: u64) -> Arc<AvailabilityView> {
    view_of(&format!("[types.balance]\n[pools]\nbalance = {n}\n"))
}

const HOTEL: &str = r#"
[types.room.properties.floor]
kind = "int"
[types.room.properties.view]
kind = "bool"
[[instances]]
resource-type = "room"
key = "512"
properties = { floor = 5, view = true }
[[instances]]
resource-type = "room"
key = "610"
properties = { floor = 6, view = true }
"#;

fn with_view() -> Predicate {
    Predicate::property("room", vec![PropertyConstraint::equals("view", true)], 1)
}

fn on_floor(n: i64) -> Predicate {
    Predicate::property("room", vec![PropertyConstraint::equals("floor", n)], 1)
}

fn both(preds: &[Predicate], view: &AvailabilityView) -> bool {
    let fast = check_satisfiable(preds, view);
    assert_eq!(fast, exhaustive_satisfiable(preds, view), "solver and oracle disagree on {preds:?}");
    fast
}

#[test]
fn additive_balance() {
    let preds = [Predicate::quantity("balance", 100), Predicate::quantity("balance", 50)];
    assert!(!both(&preds, &pool(120)));
    assert!(both(&preds, &pool(150)));
}

#[test]
fn empty_set_is_feasible() {
    assert!(both(&[], &pool(0)));
    assert!(both(&[], &view_of("")));
}

#[test]
fn hotel_rooms_rearranged() {
    let v = view_of(HOTEL);
    assert!(both(&[with_view(), on_floor(5)], &v));
    assert!(both(&[on_floor(5), with_view()], &v));
    assert!(!both(&[on_floor(5), on_floor(5)], &v));

    let solved = FeasibilityProblem::build(&[with_view(), on_floor(5)], &v)
        .solve()
        .unwrap();
    assert_eq!(solved.instances_for(0), vec![InstanceId::new("room", "610")]);
    assert_eq!(solved.instances_for(1), vec![InstanceId::new("room", "512")]);
}

#[test]
fn named_seat_excluded_from_anonymous_count() {
    let doc = r#"
[types.economy-seat]
[[instances]]
resource-type = "economy-seat"
key = "24F"
[[instances]]
resource-type = "economy-seat"
key = "24G"
status = "promised"
[[instances]]
resource-type = "economy-seat"
key = "24H"
"#;
    let v = view_of(doc);
    let named = Predicate::named(InstanceId::new("economy-seat", "24G"));
    // two seats are not promised; counting 24G as well would give three
    assert!(both(&[named.clone(), Predicate::quantity("economy-seat", 2)], &v));
    assert!(!both(&[named, Predicate::quantity("economy-seat", 3)], &v));
}

#[test]
fn taken_instances_are_not_supply() {
    let doc = r#"
[types.painting]
[[instances]]
resource-type = "painting"
key = "starry-night"
status = "taken"
"#;
    let v = view_of(doc);
    assert!(!both(
        &[Predicate::named(InstanceId::new("painting", "starry-night"))],
        &v
    ));
}

#[test]
fn grant_accept_and_reject() {
    let stock = |n| view_of(&format!("[types.pink-widget]\n[pools]\npink-widget = {n}\n"));
    let mut e = PromiseEngine::new();
    let rec = e
        .grant(vec![Predicate::quantity("pink-widget", 5)], 30, 0, &stock(10))
        .unwrap();
    assert_eq!(rec.expires_at, 30);
    assert_eq!(rec.status, PromiseStatus::Active);

    let mut e = PromiseEngine::new();
    assert_eq!(
        e.grant(vec![Predicate::quantity("pink-widget", 5)], 30, 0, &stock(3)),
        Err(Rejection::Unsatisfiable)
    );
    assert!(e.table().is_empty());
}

#[test]
fn multi_predicate_grant_is_all_or_nothing() {
    let doc = r#"
[types.seat]
[types.car]
[types.room]
[pools]
seat = 3
car = 0
room = 2
"#;
    let v = view_of(doc);
    let mut e = PromiseEngine::new();
    let trip = vec![
        Predicate::quantity("seat", 1),
        Predicate::quantity("car", 1),
        Predicate::quantity("room", 1),
    ];
    assert_eq!(e.grant(trip, 10, 0, &v), Err(Rejection::Unsatisfiable));
    assert_eq!(e.table().len(), 0);
}

#[test]
fn grant_rejects_bad_input() {
    let v = pool(10);
    let mut e = PromiseEngine::new();
    assert_eq!(e.grant(vec![], 5, 0, &v), Err(Rejection::EmptyRequest));
    assert_eq!(
        e.grant(vec![Predicate::quantity("balance", 1)], 0, 0, &v),
        Err(Rejection::ZeroDuration)
    );
    assert_eq!(
        e.grant(vec![Predicate::quantity("balance", 0)], 5, 0, &v),
        Err(Rejection::Invalid(PredicateError::NonPositiveAmount))
    );
}

#[test]
fn release_returns_capacity() {
    let v = pool(10);
    let mut e = PromiseEngine::new();
    let p = || vec![Predicate::quantity("balance", 10)];
    let first = e.grant(p(), 5, 0, &v).unwrap();
    assert_eq!(e.grant(p(), 5, 0, &v), Err(Rejection::Unsatisfiable));
    e.release(&[first.id]).unwrap();
    assert!(e.grant(p(), 5, 0, &v).is_ok());
    assert_ne!(e.table().active().next().unwrap().id, first.id);
}

#[test]
fn release_is_idempotent_and_checks_ids() {
    let v = pool(10);
    let mut e = PromiseEngine::new();
    let r = e.grant(vec![Predicate::quantity("balance", 1)], 5, 0, &v).unwrap();
    e.release(&[r.id]).unwrap();
    e.release(&[r.id]).unwrap();
    assert_eq!(e.table().get(r.id).unwrap().status, PromiseStatus::Released);
    assert_eq!(
        e.release(&[r.id, PromiseId(99)]),
        Err(PromiseError::UnknownPromise(PromiseId(99)))
    );
}

#[test]
fn exchange_stronger_is_rejected_weaker_granted() {
    let v = pool(150);
    let mut e = PromiseEngine::new();
    let old = e.grant(vec![Predicate::quantity("balance", 100)], 50, 0, &v).unwrap();

    let before = e.table().clone();
    assert_eq!(
        e.exchange(vec![Predicate::quantity("balance", 200)], 50, &[old.id], 1, &v),
        Err(PromiseError::Rejected(Rejection::Unsatisfiable))
    );
    assert_eq!(e.table(), &before);

    let new = e
        .exchange(vec![Predicate::quantity("balance", 50)], 50, &[old.id], 1, &v)
        .unwrap()
        .unwrap();
    let active: Vec<_> = e.table().active_predicates().cloned().collect();
    assert_eq!(active, vec![Predicate::quantity("balance", 50)]);
    assert_eq!(e.table().get(old.id).unwrap().status, PromiseStatus::Released);
    assert!(e.table().get(new.id).unwrap().is_active());
}

#[test]
fn exchange_to_same_capacity_uses_released_share() {
    // 150 on hand, 100 promised: a plain grant of 150 fails but swapping the
    // 100 for 150 succeeds
    let v = pool(150);
    let mut e = PromiseEngine::new();
    let old = e.grant(vec![Predicate::quantity("balance", 100)], 50, 0, &v).unwrap();
    assert!(e.grant(vec![Predicate::quantity("balance", 150)], 50, 0, &v).is_err());
    assert!(e
        .exchange(vec![Predicate::quantity("balance", 150)], 50, &[old.id], 0, &v)
        .unwrap()
        .is_some());
}

#[test]
fn degenerate_exchange_is_release() {
    let v = pool(150);
    let mut e = PromiseEngine::new();
    let old = e.grant(vec![Predicate::quantity("balance", 100)], 50, 0, &v).unwrap();
    assert_eq!(e.exchange(vec![], 50, &[old.id], 1, &v), Ok(None));
    assert_eq!(e.table().active_count(), 0);
    assert_eq!(
        e.exchange(vec![], 50, &[], 1, &v),
        Err(PromiseError::Rejected(Rejection::EmptyRequest))
    );
}

#[test]
fn exchange_requires_active_ids() {
    let v = pool(150);
    let mut e = PromiseEngine::new();
    let old = e.grant(vec![Predicate::quantity("balance", 100)], 5, 0, &v).unwrap();
    assert_eq!(
        e.exchange(vec![Predicate::quantity("balance", 1)], 5, &[PromiseId(7)], 1, &v),
        Err(PromiseError::UnknownPromise(PromiseId(7)))
    );
    e.expire_sweep(5);
    assert_eq!(
        e.exchange(vec![Predicate::quantity("balance", 1)], 5, &[old.id], 6, &v),
        Err(PromiseError::NotActive(old.id))
    );
}

#[test]
fn expiry_boundaries() {
    let v = pool(10);
    let mut e = PromiseEngine::new();
    let a = e.grant(vec![Predicate::quantity("balance", 10)], 10, 0, &v).unwrap();
    assert!(e.expire_sweep(9).is_empty());
    assert_eq!(e.expire_sweep(10), vec![a.id]);

    let mut e = PromiseEngine::new();
    let b = e.grant(vec![Predicate::quantity("balance", 10)], 10, 0, &v).unwrap();
    assert_eq!(e.expire_sweep(11), vec![b.id]);
}

#[test]
fn expiry_unblocks_conflicting_grant() {
    // timeline: t=0 grant all 10; t=5 competing grant fails; t=10 sweep; t=10 grant succeeds
    let v = pool(10);
    let mut e = PromiseEngine::new();
    e.grant(vec![Predicate::quantity("balance", 10)], 10, 0, &v).unwrap();
    e.expire_sweep(5);
    assert!(e.grant(vec![Predicate::quantity("balance", 4)], 10, 5, &v).is_err());
    e.expire_sweep(10);
    assert!(e.grant(vec![Predicate::quantity("balance", 4)], 10, 10, &v).is_ok());
}

#[test]
fn post_action_check_after_consumption() {
    let mut e = PromiseEngine::new();
    let before = pool(10);
    let mine = e.grant(vec![Predicate::quantity("balance", 5)], 50, 0, &before).unwrap();
    e.grant(vec![Predicate::quantity("balance", 5)], 50, 0, &before).unwrap();
    assert_eq!(e.post_action_check(&[mine.id], &pool(5)), Ok(()));
    assert_eq!(e.post_action_check(&[mine.id], &pool(4)), Err(Violation));
    // untouched state stays fine
    assert_eq!(e.post_action_check(&[], &before), Ok(()));
}

#[test]
fn invariant_scans() {
    let v = pool(10);
    let mut e = PromiseEngine::new();
    e.grant(vec![Predicate::quantity("balance", 6)], 5, 0, &v).unwrap();
    assert!(e.table().pool_additivity_violations(&v).is_empty());
    assert_eq!(
        e.table().pool_additivity_violations(&pool(5)),
        vec![("balance".into(), 6, 5)]
    );
    assert!(e.table().named_exclusivity_violations().is_empty());
}

// Randomized comparison against the exhaustive oracle.

fn room_schema() -> CatalogSchema {
    CatalogSchema::new()
        .with_type("cash", TypeDecl::default())
        .with_type(
            "room",
            TypeDecl::default()
                .with_property("floor", PropertyDomain::Int { min: Some(1), max: Some(3) })
                .with_property(
                    "grade",
                    PropertyDomain::Enum {
                        values: vec!["basic".into(), "deluxe".into(), "suite".into()],
                        ordered: true,
                    },
                )
                .with_property("view", PropertyDomain::Bool),
        )
}

const GRADES: [&str; 3] = ["basic", "deluxe", "suite"];

fn arb_room(key: usize) -> impl Strategy<Value = InstanceRecord> {
    (1i64..=3, 0usize..3, any::<bool>(), 0u8..4).prop_map(move |(floor, grade, view, st)| {
        let mut properties = BTreeMap::new();
        properties.insert("floor".to_string(), Scalar::Int(floor));
        properties.insert("grade".to_string(), Scalar::from(GRADES[grade]));
        properties.insert("view".to_string(), Scalar::Bool(view));
        InstanceRecord {
            id: InstanceId::new("room", format!("r{key}")),
            properties,
            status: match st {
                0 => InstanceStatus::Taken,
                1 => InstanceStatus::Promised,
                _ => InstanceStatus::Available,
            },
        }
    })
}

fn arb_view() -> impl Strategy<Value = AvailabilityView> {
    (0usize..=8, 0u64..8).prop_flat_map(|(n, cash)| {
        let rooms: Vec<_> = (0..n).map(arb_room).collect();
        rooms.prop_map(move |rooms| {
            let mut pools = BTreeMap::new();
            pools.insert(ResourceTypeId::from("cash"), cash);
            AvailabilityView::new(Arc::new(room_schema()), pools, rooms)
        })
    })
}

fn arb_predicate() -> impl Strategy<Value = Predicate> {
    let constraint = prop_oneof![
        (1i64..=3).prop_map(|f| PropertyConstraint::equals("floor", f)),
        (1i64..=3).prop_map(|f| PropertyConstraint::at_least("floor", f)),
        (0usize..3).prop_map(|g| PropertyConstraint::at_least("grade", GRADES[g])),
        any::<bool>().prop_map(|v| PropertyConstraint::equals("view", v)),
    ];
    prop_oneof![
        (1u64..5).prop_map(|n| Predicate::quantity("cash", n)),
        (1u64..3).prop_map(|n| Predicate::quantity("room", n)),
        (0usize..9).prop_map(|k| Predicate::named(InstanceId::new("room", format!("r{k}")))),
        (prop::collection::vec(constraint, 1..3), 1u64..3).prop_map(|(mut cs, n)| {
            cs.sort_by(|a, b| a.property_name.cmp(&b.property_name));
            cs.dedup_by(|a, b| a.property_name == b.property_name);
            Predicate::property("room", cs, n)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn solver_matches_oracle(view in arb_view(), preds in prop::collection::vec(arb_predicate(), 0..=6)) {
        prop_assert_eq!(
            check_satisfiable(&preds, &view),
            exhaustive_satisfiable(&preds, &view)
        );
    }

    #[test]
    fn assignment_is_valid(view in arb_view(), preds in prop::collection::vec(arb_predicate(), 0..=6)) {
        let problem = FeasibilityProblem::build(&preds, &view);
        if let Some(a) = problem.solve() {
            let mut used: BTreeMap<String, u64> = BTreeMap::new();
            for (i, p) in preds.iter().enumerate() {
                let total: u64 = a.per_demand[i].iter().map(|(_, n)| n).sum();
                prop_assert_eq!(total, p.amount());
                for (unit, n) in &a.per_demand[i] {
                    *used.entry(format!("{unit:?}")).or_default() += n;
                }
            }
            for s in &problem.supplies {
                let key = format!("{:?}", s.unit);
                prop_assert!(used.get(&key).copied().unwrap_or(0) <= s.capacity);
            }
        }
    }

    #[test]
    fn smaller_retry_never_errors(n in 1u64..20, on_hand in 0u64..20, cut in 1u64..20) {
        let v = pool(on_hand);
        let mut e = PromiseEngine::new();
        let first = e.grant(vec![Predicate::quantity("balance", n)], 5, 0, &v);
        if first.is_err() && cut < n {
            let retry = e.grant(vec![Predicate::quantity("balance", n - cut)], 5, 0, &v);
            prop_assert!(matches!(retry, Ok(_) | Err(Rejection::Unsatisfiable)));
        }
    }

    #[test]
    fn table_stays_feasible(ops in prop::collection::vec((0u8..4, 1u64..6, 1u64..8), 1..40)) {
        let v = pool(12);
        let mut e = PromiseEngine::new();
        let mut now = 0;
        for (kind, amount, dur) in ops {
            match kind {
                0 | 1 => { let _ = e.grant(vec![Predicate::quantity("balance", amount)], dur, now, &v); }
                2 => {
                    let first = e.table().active().map(|r| r.id).next();
                    if let Some(id) = first {
                        let _ = e.exchange(vec![Predicate::quantity("balance", amount)], dur, &[id], now, &v);
                    }
                }
                _ => { now += dur; e.expire_sweep(now); }
            }
            prop_assert!(e.is_consistent(&v));
            prop_assert!(e.table().pool_additivity_violations(&v).is_empty());
        }
    }
}
