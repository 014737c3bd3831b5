use proptest::prelude::*;
use serde_json::json;

use super::*;
use crate::engine::PromiseId;
use crate::predicate::{InstanceId, Predicate, PropertyConstraint};
use crate::protocol::{
    ActionStatus, PromiseRequestMsg, PromiseResponseMsg, PromiseResult, ReleaseOption,
};

fn widgets(n: u64) -> PromiseRequestMsg {
    PromiseRequestMsg::new("r1", vec![Predicate::quantity("pink-widget", n)], 30)
}

#[test]
fn single_request_round_trips() {
    let e = Envelope::request(widgets(5));
    let bytes = encode(&e).unwrap();
    assert_eq!(decode(&bytes).unwrap(), e);
}

#[test]
fn empty_envelope_is_rejected() {
    assert!(matches!(
        encode(&Envelope::default()),
        Err(ProtocolError::InvariantViolation(_))
    ));
    assert!(matches!(
        decode(b"{}"),
        Err(ProtocolError::MalformedMessage(_))
    ));
}

#[test]
fn piggybacked_response_round_trips() {
    let mut e = Envelope::request(widgets(5));
    e.promise.as_mut().unwrap().promise_response.push(PromiseResponseMsg {
        promise_identifier: Some(PromiseId(3)),
        promise_result: PromiseResult::Accepted,
        promise_duration: 20,
        promise_correlation: "r0".into(),
        reason: None,
    });
    assert_eq!(decode(&encode(&e).unwrap()).unwrap(), e);
}

#[test]
fn wire_uses_protocol_element_names() {
    let e = Envelope::request(widgets(5).releasing(vec![PromiseId(1)]))
        .with_action("purchase-stock", json!({"amount": 5}))
        .with_environment(EnvironmentMsg::new([(PromiseId(1), ReleaseOption::ReleaseAfterSuccess)]));
    let text = String::from_utf8(encode(&e).unwrap()).unwrap();
    for name in [
        "\"promise-request\"",
        "\"request-identifier\"",
        "\"predicates\"",
        "\"resources\"",
        "\"promise-duration\"",
        "\"promise-identifier\"",
        "\"environment\"",
        "\"release-options\"",
        "\"release-after-success\"",
    ] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
    let mut reply = Envelope::default();
    reply.promise = Some(PromisePart {
        promise_request: vec![],
        promise_response: vec![PromiseResponseMsg {
            promise_identifier: None,
            promise_result: PromiseResult::Rejected,
            promise_duration: 0,
            promise_correlation: "r1".into(),
            reason: None,
        }],
    });
    let text = String::from_utf8(encode(&reply).unwrap()).unwrap();
    for name in ["\"promise-response\"", "\"promise-result\"", "\"promise-correlation\"", "\"rejected\""] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
}

#[test]
fn exact_layout_of_a_grant_request() {
    let text = String::from_utf8(encode(&Envelope::request(widgets(5))).unwrap()).unwrap();
    assert_eq!(
        text,
        r#"{"header":{"promise":{"promise-request":[{"request-identifier":"r1","predicates":[{"quantity":{"resource-type":"pink-widget","amount":5}}],"resources":[{"resource-type":"pink-widget"}],"promise-duration":30}]}},"body":{}}"#
    );
}

#[test]
fn invariants_on_requests() {
    let mut r = widgets(5);
    r.resources.clear();
    assert!(encode(&Envelope::request(r)).is_err());

    let r = PromiseRequestMsg::new("r1", vec![], 30);
    assert!(encode(&Envelope::request(r.clone())).is_err());
    // empty predicates are fine when the request only releases
    assert!(encode(&Envelope::request(r.releasing(vec![PromiseId(2)]))).is_ok());

    assert!(encode(&Envelope::requests(vec![widgets(1), widgets(2)])).is_err());

    let env = EnvironmentMsg {
        promise_identifier: vec![PromiseId(1)],
        release_options: vec![],
    };
    assert!(encode(&Envelope::action("x", json!(null)).with_environment(env.clone())).is_err());
    let mut no_action = Envelope::request(widgets(1));
    no_action.environment = Some(EnvironmentMsg::default());
    assert!(encode(&no_action).is_err());
}

#[test]
fn unknown_fields_are_malformed() {
    assert!(decode(br#"{"body":{"action":{"name":"a","payload":1,"x":2}}}"#).is_err());
    assert!(decode(br#"{"hdr":{}}"#).is_err());
    assert!(decode(br#"{"body":{"action":{"name":"a"}}}"#).is_ok());
}

#[test]
fn framing_round_trip_and_limits() {
    let mut buf = Vec::new();
    write_frame(&mut buf, b"hello").unwrap();
    write_frame(&mut buf, b"").unwrap();
    let mut r = &buf[..];
    assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"hello");
    assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
    assert!(read_frame(&mut r).unwrap().is_none());

    let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
    assert!(matches!(
        read_frame(&mut &huge[..]),
        Err(ProtocolError::FrameTooLarge(_))
    ));
    let truncated = [0u8, 0, 0, 9, b'x'];
    assert!(matches!(read_frame(&mut &truncated[..]), Err(ProtocolError::Io(_))));
}

fn arb_predicate() -> impl Strategy<Value = Predicate> {
    let name = "[a-z][a-z0-9-]{0,8}";
    prop_oneof![
        (name, 1u64..1000).prop_map(|(t, n)| Predicate::quantity(t.as_str(), n)),
        (name, "[A-Za-z0-9@.-]{1,12}").prop_map(|(t, k)| Predicate::named(InstanceId::new(t.as_str(), k))),
        (name, prop::collection::vec(("[a-z]{1,6}", any::<i64>(), any::<bool>()), 1..3), 1u64..5).prop_map(
            |(t, cs, n)| {
                let cs = cs
                    .into_iter()
                    .map(|(p, v, at_least)| if at_least {
                        PropertyConstraint::at_least(p, v)
                    } else {
                        PropertyConstraint::equals(p, v)
                    })
                    .collect();
                Predicate::property(t.as_str(), cs, n)
            }
        ),
    ]
}

fn arb_json() -> impl Strategy<Value = serde_json::Value> {
    let leaf = prop_oneof![
        Just(serde_json::Value::Null),
        any::<bool>().prop_map(serde_json::Value::from),
        any::<i64>().prop_map(serde_json::Value::from),
        ".{0,10}".prop_map(serde_json::Value::from),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(serde_json::Value::from),
            prop::collection::btree_map("[a-z-]{1,6}", inner, 0..4)
                .prop_map(|m| serde_json::Value::Object(m.into_iter().collect())),
        ]
    })
}

fn arb_envelope() -> impl Strategy<Value = Envelope> {
    let request = (prop::collection::vec(arb_predicate(), 0..4), 1u64..500, prop::option::of(prop::collection::vec(any::<u64>().prop_map(PromiseId), 0..3)));
    let response = (prop::option::of(any::<u64>()), any::<bool>(), 0u64..500, "[a-z0-9]{1,6}", prop::option::of(".{0,12}"));
    let status = prop::sample::select(vec![
        ActionStatus::Succeeded,
        ActionStatus::Failed,
        ActionStatus::RejectedByPromiseViolation,
        ActionStatus::PromiseExpired,
        ActionStatus::UnknownAction,
        ActionStatus::UnknownPromiseId,
    ]);
    (
        prop::collection::vec(request, 0..3),
        prop::collection::vec(response, 0..3),
        prop::option::of(("[a-z-]{1,10}", arb_json())),
        prop::collection::vec((any::<u64>(), any::<bool>()), 0..3),
        prop::option::of((status, prop::option::of(arb_json()))),
    )
        .prop_map(|(reqs, resps, action, env, result)| {
            let promise_request = reqs
                .into_iter()
                .enumerate()
                .map(|(i, (preds, d, rel))| {
                    let mut r = PromiseRequestMsg::new(format!("req-{i}"), preds, d);
                    r.promise_identifier = rel;
                    if r.predicates.is_empty() {
                        r.promise_identifier = Some(vec![PromiseId(i as u64)]);
                    }
                    r
                })
                .collect::<Vec<_>>();
            let promise_response = resps
                .into_iter()
                .map(|(id, ok, d, corr, reason)| PromiseResponseMsg {
                    promise_identifier: if ok { id.map(PromiseId) } else { None },
                    promise_result: if ok { PromiseResult::Accepted } else { PromiseResult::Rejected },
                    promise_duration: d,
                    promise_correlation: corr,
                    reason,
                })
                .collect::<Vec<_>>();
            let mut e = Envelope::default();
            if !promise_request.is_empty() || !promise_response.is_empty() {
                e.promise = Some(PromisePart { promise_request, promise_response });
            }
            if let Some((name, payload)) = action {
                e.action = Some(crate::protocol::ActionMsg { name, payload });
                if !env.is_empty() {
                    e.environment = Some(EnvironmentMsg::new(env.into_iter().map(|(id, rel)| {
                        (PromiseId(id), if rel { ReleaseOption::ReleaseAfterSuccess } else { ReleaseOption::Retain })
                    })));
                }
            }
            if let Some((status, payload)) = result {
                e.action_result = Some(crate::protocol::ActionResultMsg {
                    name: "act".into(),
                    status,
                    payload,
                    reason: None,
                });
            }
            if e.validate().is_err() {
                e = Envelope::action("noop", serde_json::Value::Null);
            }
            e
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn round_trip(e in arb_envelope()) {
        let bytes = encode(&e).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), e);
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn decoder_survives_mangled_json(e in arb_envelope(), cut in 0usize..400, flip in any::<u8>()) {
        let mut bytes = encode(&e).unwrap();
        if !bytes.is_empty() {
            let i = cut % bytes.len();
            bytes[i] ^= flip;
            bytes.truncate(bytes.len().max(1) - (cut % 3));
        }
        let _ = decode(&bytes);
    }
}
