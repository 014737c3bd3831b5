//! Promise protocol messages.
//!
//! An [`Envelope`] carries an optional promise part (requests and
//! piggybacked responses), an optional promise environment, and an optional
//! action. Replies reuse the same envelope with the action result and any
//! fault filled in. The wire encoding is described in [`codec`] and in
//! `docs/wire-format.md`.

pub mod codec;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::PromiseId;
use crate::predicate::{InstanceId, Predicate, ResourceTypeId};

pub use codec::{decode, encode, read_frame, write_frame, ProtocolError, MAX_FRAME_LEN};

/// A resource named in a promise request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceRef {
    ResourceType(ResourceTypeId),
    Instance(InstanceId),
}

impl ResourceRef {
    fn covers(&self, p: &Predicate) -> bool {
        match (self, p) {
            (ResourceRef::ResourceType(t), p) => t == p.resource_type(),
            (ResourceRef::Instance(i), Predicate::Named { instance }) => i == instance,
            (ResourceRef::Instance(_), _) => false,
        }
    }

    /// The minimal resource list covering `predicates`.
    pub fn covering(predicates: &[Predicate]) -> Vec<ResourceRef> {
        let mut out: Vec<ResourceRef> = Vec::new();
        for p in predicates {
            let r = match p {
                Predicate::Named { instance } => ResourceRef::Instance(instance.clone()),
                other => ResourceRef::ResourceType(other.resource_type().clone()),
            };
            if !out.contains(&r) {
                out.push(r);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PromiseRequestMsg {
    pub request_identifier: String,
    pub predicates: Vec<Predicate>,
    pub resources: Vec<ResourceRef>,
    pub promise_duration: u64,
    /// Existing promises to release if, and only if, this request is
    /// granted. Present means the request is an exchange.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promise_identifier: Option<Vec<PromiseId>>,
}

impl PromiseRequestMsg {
    /// A grant request whose resource list is derived from the predicates.
    pub fn new(request_identifier: impl Into<String>, predicates: Vec<Predicate>, duration: u64) -> Self {
        Self {
            request_identifier: request_identifier.into(),
            resources: ResourceRef::covering(&predicates),
            predicates,
            promise_duration: duration,
            promise_identifier: None,
        }
    }

    pub fn releasing(mut self, ids: Vec<PromiseId>) -> Self {
        self.promise_identifier = Some(ids);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromiseResult {
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PromiseResponseMsg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promise_identifier: Option<PromiseId>,
    pub promise_result: PromiseResult,
    /// Granted duration; may be shorter than requested. Zero on rejection.
    pub promise_duration: u64,
    pub promise_correlation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReleaseOption {
    Retain,
    ReleaseAfterSuccess,
}

/// Promises an action runs under, with a release option per promise.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EnvironmentMsg {
    pub promise_identifier: Vec<PromiseId>,
    pub release_options: Vec<ReleaseOption>,
}

impl EnvironmentMsg {
    pub fn new(entries: impl IntoIterator<Item = (PromiseId, ReleaseOption)>) -> Self {
        let (promise_identifier, release_options) = entries.into_iter().unzip();
        Self {
            promise_identifier,
            release_options,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (PromiseId, ReleaseOption)> + '_ {
        self.promise_identifier
            .iter()
            .copied()
            .zip(self.release_options.iter().copied())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PromisePart {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub promise_request: Vec<PromiseRequestMsg>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub promise_response: Vec<PromiseResponseMsg>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ActionMsg {
    pub name: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionStatus {
    Succeeded,
    Failed,
    RejectedByPromiseViolation,
    PromiseExpired,
    UnknownAction,
    UnknownPromiseId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ActionResultMsg {
    pub name: String,
    pub status: ActionStatus,
    #[serde(
        default,
        deserialize_with = "codec::present",
        skip_serializing_if = "Option::is_none"
    )]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultCode {
    MalformedMessage,
    InternalError,
}

/// Whole-envelope failure; nothing in the request took effect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Fault {
    pub code: FaultCode,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Envelope {
    pub promise: Option<PromisePart>,
    pub environment: Option<EnvironmentMsg>,
    pub action: Option<ActionMsg>,
    pub action_result: Option<ActionResultMsg>,
    pub fault: Option<Fault>,
}

impl Envelope {
    pub fn request(req: PromiseRequestMsg) -> Self {
        Self::requests(vec![req])
    }

    pub fn requests(reqs: Vec<PromiseRequestMsg>) -> Self {
        Self {
            promise: Some(PromisePart {
                promise_request: reqs,
                promise_response: Vec::new(),
            }),
            ..Default::default()
        }
    }

    pub fn action(name: impl Into<String>, payload: Value) -> Self {
        Self::default().with_action(name, payload)
    }

    pub fn with_action(mut self, name: impl Into<String>, payload: Value) -> Self {
        self.action = Some(ActionMsg {
            name: name.into(),
            payload,
        });
        self
    }

    pub fn with_environment(mut self, env: EnvironmentMsg) -> Self {
        self.environment = Some(env);
        self
    }

    pub fn fault(code: FaultCode, message: impl Into<String>) -> Self {
        Self {
            fault: Some(Fault {
                code,
                message: message.into(),
            }),
            ..Default::default()
        }
    }

    pub fn requests_iter(&self) -> impl Iterator<Item = &PromiseRequestMsg> {
        self.promise.iter().flat_map(|p| p.promise_request.iter())
    }

    pub fn responses(&self) -> &[PromiseResponseMsg] {
        self.promise
            .as_ref()
            .map_or(&[][..], |p| p.promise_response.as_slice())
    }

    /// Checks the structural invariants every envelope on the wire must meet.
    pub fn validate(&self) -> Result<(), String> {
        if self.promise.is_none()
            && self.action.is_none()
            && self.action_result.is_none()
            && self.fault.is_none()
        {
            return Err("envelope carries neither a promise part nor an action".into());
        }
        if let Some(env) = &self.environment {
            if self.action.is_none() {
                return Err("environment without an action".into());
            }
            if env.promise_identifier.len() != env.release_options.len() {
                return Err(format!(
                    "environment lists {} promise identifiers but {} release options",
                    env.promise_identifier.len(),
                    env.release_options.len()
                ));
            }
        }
        if let Some(action) = &self.action {
            if action.name.is_empty() {
                return Err("action name is empty".into());
            }
        }
        let mut seen = BTreeSet::new();
        for req in self.requests_iter() {
            if !seen.insert(req.request_identifier.as_str()) {
                return Err(format!(
                    "duplicate request identifier `{}`",
                    req.request_identifier
                ));
            }
            let releases = req.promise_identifier.as_ref().is_some_and(|r| !r.is_empty());
            if req.predicates.is_empty() && !releases {
                return Err(format!(
                    "request `{}` has no predicates and releases nothing",
                    req.request_identifier
                ));
            }
            for p in &req.predicates {
                if !req.resources.iter().any(|r| r.covers(p)) {
                    return Err(format!(
                        "request `{}`: predicate {p} names a resource missing from resources",
                        req.request_identifier
                    ));
                }
            }
        }
        for resp in self.responses() {
            if resp.promise_result == PromiseResult::Rejected && resp.promise_identifier.is_some() {
                return Err(format!(
                    "rejected response `{}` carries a promise identifier",
                    resp.promise_correlation
                ));
            }
        }
        Ok(())
    }
}
