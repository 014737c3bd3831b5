use serde_json::json;

use super::*;
use crate::catalog::InstanceStatus;
use crate::predicate::{InstanceId, Predicate, PropertyConstraint};
use crate::protocol::{EnvironmentMsg, PromiseRequestMsg};

fn merchant(stock: u64) -> PromiseManager {
    let doc = format!("[types.pink-widget]\n[pools]\npink-widget = {stock}\n");
    PromiseManager::with_standard_handlers(ResourceCatalog::load_catalog(&doc).unwrap(), 100)
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
properties = { floor = 6, view = false }
"#;

fn hotel() -> PromiseManager {
    PromiseManager::with_standard_handlers(ResourceCatalog::load_catalog(HOTEL).unwrap(), 100)
}

fn widgets(id: &str, n: u64, d: u64) -> Envelope {
    Envelope::request(PromiseRequestMsg::new(id, vec![Predicate::quantity("pink-widget", n)], d))
}

fn granted(reply: &Envelope) -> Option<PromiseId> {
    let r = &reply.responses()[0];
    match r.promise_result {
        PromiseResult::Accepted => r.promise_identifier,
        PromiseResult::Rejected => None,
    }
}

fn status(reply: &Envelope) -> ActionStatus {
    reply.action_result.as_ref().expect("action result").status
}

fn on_hand(m: &PromiseManager, ty: &str) -> u64 {
    m.catalog()
        .snapshot_availability()
        .quantity_on_hand(&ty.into())
        .unwrap()
}

fn purchase(n: u64) -> Envelope {
    Envelope::action("purchase-stock", json!({"resource-type": "pink-widget", "amount": n}))
}

#[test]
fn merchant_second_grant_rejected_at_120() {
    let mut m = merchant(120);
    assert!(granted(&m.handle(&widgets("a", 60, 30), 0)).is_some());
    let r = m.handle(&widgets("b", 70, 30), 1);
    assert_eq!(r.responses()[0].promise_result, PromiseResult::Rejected);
    assert_eq!(r.responses()[0].promise_correlation, "b");
    assert!(r.responses()[0].reason.is_some());
}

#[test]
fn merchant_both_granted_at_150() {
    let mut m = merchant(150);
    assert!(granted(&m.handle(&widgets("a", 60, 30), 0)).is_some());
    assert!(granted(&m.handle(&widgets("b", 70, 30), 1)).is_some());
    assert_eq!(m.engine().table().active_count(), 2);
}

#[test]
fn duration_is_capped() {
    let mut m = merchant(10);
    let r = m.handle(&widgets("a", 1, 5000), 0);
    assert_eq!(r.responses()[0].promise_duration, 100);
    assert_eq!(m.engine().table().active().next().unwrap().expires_at, 100);
}

#[test]
fn violating_action_is_rolled_back() {
    let mut m = merchant(120);
    m.handle(&widgets("a", 100, 30), 0);
    let before = m.state_digest();
    let r = m.handle(&purchase(30), 1);
    assert_eq!(status(&r), ActionStatus::RejectedByPromiseViolation);
    assert_eq!(m.state_digest(), before);
    assert_eq!(on_hand(&m, "pink-widget"), 120);
    assert_eq!(m.counters().violations_rolled_back, 1);

    let r = m.handle(&purchase(20), 2);
    assert_eq!(status(&r), ActionStatus::Succeeded);
    assert_eq!(on_hand(&m, "pink-widget"), 100);
}

#[test]
fn promised_purchase_releases_after_success() {
    let mut m = merchant(120);
    let p = granted(&m.handle(&widgets("a", 60, 30), 0)).unwrap();
    let q = granted(&m.handle(&widgets("b", 50, 30), 0)).unwrap();
    let act = purchase(60).with_environment(EnvironmentMsg::new([(p, ReleaseOption::ReleaseAfterSuccess)]));
    assert_eq!(status(&m.handle(&act, 1)), ActionStatus::Succeeded);
    assert_eq!(on_hand(&m, "pink-widget"), 60);
    let t = m.engine().table();
    assert_eq!(t.get(p).unwrap().status, PromiseStatus::Released);
    assert_eq!(t.get(q).unwrap().status, PromiseStatus::Active);
}

#[test]
fn failed_handler_keeps_promises_and_state() {
    let mut m = merchant(120);
    let p = granted(&m.handle(&widgets("a", 60, 30), 0)).unwrap();
    let before = m.state_digest();
    let act = Envelope::action(
        "purchase-stock",
        json!({"resource-type": "pink-widget", "amount": 60, "fail": "card declined"}),
    )
    .with_environment(EnvironmentMsg::new([(p, ReleaseOption::ReleaseAfterSuccess)]));
    let r = m.handle(&act, 1);
    assert_eq!(status(&r), ActionStatus::Failed);
    assert!(r.action_result.unwrap().reason.unwrap().contains("card declined"));
    assert_eq!(m.state_digest(), before);
    assert!(m.engine().table().get(p).unwrap().is_active());
}

#[test]
fn expired_and_unknown_promises_in_environment() {
    let mut m = merchant(120);
    let p = granted(&m.handle(&widgets("a", 10, 5), 0)).unwrap();
    let env = |id| EnvironmentMsg::new([(id, ReleaseOption::Retain)]);

    let ok = m.handle(&purchase(1).with_environment(env(p)), 4);
    assert_eq!(status(&ok), ActionStatus::Succeeded);

    let late = m.handle(&purchase(1).with_environment(env(p)), 5);
    assert_eq!(status(&late), ActionStatus::PromiseExpired);
    assert_eq!(on_hand(&m, "pink-widget"), 119);

    let unknown = m.handle(&purchase(1).with_environment(env(PromiseId(999))), 6);
    assert_eq!(status(&unknown), ActionStatus::UnknownPromiseId);
}

#[test]
fn unknown_action_still_processes_requests() {
    let mut m = merchant(10);
    let e = widgets("a", 5, 10).with_action("launch-rocket", json!({}));
    let r = m.handle(&e, 0);
    assert_eq!(status(&r), ActionStatus::UnknownAction);
    assert!(granted(&r).is_some());
}

#[test]
fn named_promise_tags_instance_and_untags_on_expiry() {
    let mut m = hotel();
    let id = InstanceId::new("room", "512");
    let req = PromiseRequestMsg::new("r", vec![Predicate::named(id.clone())], 10);
    let p = granted(&m.handle(&Envelope::request(req), 0)).unwrap();
    let st = |m: &PromiseManager| m.catalog().snapshot_availability().instance(&id).unwrap().status;
    assert_eq!(st(&m), InstanceStatus::Promised);

    m.handle(&Envelope::action("noop", json!(null)), 10);
    assert_eq!(m.engine().table().get(p).unwrap().status, PromiseStatus::Expired);
    assert_eq!(st(&m), InstanceStatus::Available);
}

#[test]
fn taking_a_promised_room_is_refused() {
    let mut m = hotel();
    let req = PromiseRequestMsg::new(
        "r",
        vec![Predicate::property("room", vec![PropertyConstraint::equals("view", true)], 1)],
        10,
    );
    granted(&m.handle(&Envelope::request(req), 0)).unwrap();
    let take = Envelope::action("take-instance", json!({"resource-type": "room", "key": "512"}));
    assert_eq!(status(&m.handle(&take, 1)), ActionStatus::RejectedByPromiseViolation);
    let take = Envelope::action("take-instance", json!({"resource-type": "room", "key": "610"}));
    assert_eq!(status(&m.handle(&take, 1)), ActionStatus::Succeeded);
}

#[test]
fn book_and_fulfil_use_the_matching() {
    let mut m = hotel();
    let view_room = Predicate::property("room", vec![PropertyConstraint::equals("view", true)], 1);
    let any_room = Predicate::quantity("room", 1);
    let p = granted(&m.handle(&Envelope::request(PromiseRequestMsg::new("a", vec![view_room], 10)), 0)).unwrap();
    let q = granted(&m.handle(&Envelope::request(PromiseRequestMsg::new("b", vec![any_room], 10)), 0)).unwrap();

    // The any-room holder fulfils first; it must not be handed 512.
    let act = Envelope::action("fulfil", json!({}))
        .with_environment(EnvironmentMsg::new([(q, ReleaseOption::ReleaseAfterSuccess)]));
    let r = m.handle(&act, 1);
    assert_eq!(status(&r), ActionStatus::Succeeded);
    assert_eq!(r.action_result.unwrap().payload.unwrap(), json!({"taken": [[{"resource-type": "room", "key": "610"}]]}));

    let act = Envelope::action("fulfil", json!({}))
        .with_environment(EnvironmentMsg::new([(p, ReleaseOption::ReleaseAfterSuccess)]));
    assert_eq!(status(&m.handle(&act, 2)), ActionStatus::Succeeded);
    assert_eq!(m.engine().table().active_count(), 0);

    let book = Envelope::action("book", json!({"predicates": [{"quantity": {"resource-type": "room", "amount": 1}}]}));
    let r = m.handle(&book, 3);
    assert_eq!(status(&r), ActionStatus::Failed);
    assert!(r.action_result.unwrap().reason.unwrap().starts_with("resource-unavailable"));
}

#[test]
fn gallery_purchase_without_shipper_leaves_painting() {
    let doc = "[types.painting]\n[[instances]]\nresource-type = \"painting\"\nkey = \"starry-night\"\n";
    let mut m = PromiseManager::with_standard_handlers(ResourceCatalog::load_catalog(doc).unwrap(), 100);
    let before = m.state_digest();
    let r = m.handle(
        &Envelope::action("buy-painting", json!({"key": "starry-night", "shipper-available": false})),
        0,
    );
    assert_eq!(status(&r), ActionStatus::Failed);
    assert_eq!(m.state_digest(), before);
    let r = m.handle(&Envelope::action("buy-painting", json!({"key": "starry-night"})), 1);
    assert_eq!(status(&r), ActionStatus::Succeeded);
}

#[test]
fn exchange_through_the_pipeline() {
    let mut m = merchant(100);
    let p = granted(&m.handle(&widgets("a", 60, 30), 0)).unwrap();
    let bigger = PromiseRequestMsg::new("b", vec![Predicate::quantity("pink-widget", 90)], 30).releasing(vec![p]);
    let q = granted(&m.handle(&Envelope::request(bigger), 1)).unwrap();
    assert_eq!(m.engine().table().get(p).unwrap().status, PromiseStatus::Released);
    let too_big = PromiseRequestMsg::new("c", vec![Predicate::quantity("pink-widget", 101)], 30).releasing(vec![q]);
    let r = m.handle(&Envelope::request(too_big), 2);
    assert_eq!(r.responses()[0].promise_result, PromiseResult::Rejected);
    assert!(m.engine().table().get(q).unwrap().is_active());

    let just_release = PromiseRequestMsg::new("d", vec![], 30).releasing(vec![q]);
    let r = m.handle(&Envelope::request(just_release), 3);
    assert_eq!(r.responses()[0].promise_result, PromiseResult::Accepted);
    assert_eq!(r.responses()[0].promise_identifier, None);
    assert_eq!(m.engine().table().active_count(), 0);
}

#[test]
fn injected_faults_restore_everything() {
    for stage in PipelineStage::ALL {
        let mut m = merchant(120);
        let p = granted(&m.handle(&widgets("a", 60, 5), 0)).unwrap();
        let before = m.state_digest();
        m.inject_fault(stage);
        let e = widgets("b", 10, 30)
            .with_action("purchase-stock", json!({"resource-type": "pink-widget", "amount": 60}))
            .with_environment(EnvironmentMsg::new([(p, ReleaseOption::ReleaseAfterSuccess)]));
        let r = m.handle(&e, 1);
        assert_eq!(r.fault.as_ref().unwrap().code, FaultCode::InternalError, "{stage:?}");
        assert_eq!(m.state_digest(), before, "{stage:?}");
        assert!(!m.catalog().has_active_unit());
        // the fault is one-shot
        assert_eq!(status(&m.handle(&e, 1)), ActionStatus::Succeeded);
    }
}

#[test]
fn fault_after_sweep_undoes_the_expiry() {
    let mut m = merchant(10);
    let p = granted(&m.handle(&widgets("a", 1, 5), 0)).unwrap();
    m.inject_fault(PipelineStage::AfterSweep);
    m.handle(&Envelope::action("noop", json!(null)), 9);
    assert!(m.engine().table().get(p).unwrap().is_active());
}

#[test]
fn invalid_envelope_is_a_malformed_fault() {
    let mut m = merchant(10);
    let r = m.handle(&Envelope::default(), 0);
    assert_eq!(r.fault.unwrap().code, FaultCode::MalformedMessage);
}

#[test]
fn table_dump_action() {
    let mut m = merchant(10);
    m.handle(&widgets("a", 3, 10), 0);
    let r = m.handle(&Envelope::action(TABLE_DUMP_ACTION, json!(null)), 1);
    let payload = r.action_result.unwrap().payload.unwrap();
    assert_eq!(payload["promises"].as_array().unwrap().len(), 1);
}

#[test]
fn custom_handlers_register_once() {
    let mut m = merchant(10);
    let h: Arc<dyn ActionHandler> = Arc::new(|_: &Value, _: &mut ActionContext<'_>| Ok(json!(42)));
    m.register_handler("answer", h.clone()).unwrap();
    assert!(m.register_handler("answer", h.clone()).is_err());
    assert!(m.register_handler(TABLE_DUMP_ACTION, h).is_err());
    let r = m.handle(&Envelope::action("answer", json!(null)), 0);
    assert_eq!(r.action_result.unwrap().payload, Some(json!(42)));
}

#[test]
fn server_round_trip_and_malformed_frames() {
    let m = Arc::new(std::sync::Mutex::new(merchant(120)));
    let clock = Arc::new(ManualClock::new(0));
    let server = serve("127.0.0.1:0", m.clone(), clock.clone()).unwrap();
    let mut c = Client::connect(server.local_addr()).unwrap();
    let r = c.call(&widgets("a", 60, 30)).unwrap();
    assert!(granted(&r).is_some());

    let r = c.call_raw(b"{not json").unwrap();
    assert_eq!(r.fault.unwrap().code, FaultCode::MalformedMessage);
    // connection survives
    clock.set(40);
    let r = c.call(&widgets("b", 120, 30)).unwrap();
    assert!(granted(&r).is_some(), "first promise expired at 30");
    drop(c);
    server.shutdown();
    assert_eq!(m.lock().unwrap().counters().grants, 2);
}
