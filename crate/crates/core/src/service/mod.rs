//! The promise manager: the intermediary that sits between clients and the
//! resource catalog.
//!
//! [`PromiseManager::handle`] processes one envelope as a single unit:
//!
//! 1. expire every promise whose time is up;
//! 2. process each promise request (grant, or exchange when the request
//!    names promises to release);
//! 3. if there is an action, check its promise environment, run the handler
//!    inside the catalog unit, release the `release-after-success` promises,
//!    and re-check every remaining promise against the resulting state;
//! 4. commit, or roll the action back if the handler failed or a promise
//!    would be violated.
//!
//! Grants made in step 2 stand even when the action fails. Anything that
//! goes wrong inside the pipeline itself (a catalog error, an injected
//! fault) discards the whole envelope and leaves the pre-call state.

mod clock;
mod config;
mod handlers;
mod server;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{
    AvailabilityView, CatalogError, InstanceStatus, Mutation, ResourceCatalog, UnitToken,
};
use crate::engine::{PromiseEngine, PromiseError, PromiseId, PromiseStatus};
use crate::protocol::{
    ActionResultMsg, ActionStatus, Envelope, FaultCode, PromisePart, PromiseRequestMsg,
    PromiseResponseMsg, PromiseResult, ReleaseOption,
};

pub use clock::{Clock, ManualClock, WallClock};
pub use config::{ServiceConfig, CONFIG_ENV};
pub use handlers::{
    standard_handlers, ActionContext, ActionFailure, ActionHandler, FailureKind,
};
pub use server::{serve, Client, ServerHandle, SharedManager};

/// Reserved action name that returns the promise table instead of running
/// a handler.
pub const TABLE_DUMP_ACTION: &str = "promise-table";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("a handler named `{0}` is already registered")]
    DuplicateHandler(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot bind {0}: {1}")]
    Bind(String, std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
}

/// Points in the pipeline where a test fault can be injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineStage {
    AfterSweep,
    AfterPromiseRequests,
    AfterHandler,
    AfterRelease,
    AfterPostCheck,
    BeforeCommit,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] = [
        PipelineStage::AfterSweep,
        PipelineStage::AfterPromiseRequests,
        PipelineStage::AfterHandler,
        PipelineStage::AfterRelease,
        PipelineStage::AfterPostCheck,
        PipelineStage::BeforeCommit,
    ];
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Counters {
    pub grants: u64,
    pub rejections: u64,
    pub expiries: u64,
    pub violations_rolled_back: u64,
    pub actions_succeeded: u64,
    pub actions_failed: u64,
    pub promise_expired: u64,
    pub faults: u64,
}

/// Hook called around every [`PromiseManager::handle`], while the caller
/// still has exclusive access. Used by the harness to check invariants at
/// every committed step.
pub trait Observer: Send {
    fn before(&mut self, _manager: &PromiseManager, _request: &Envelope, _now: u64) {}
    fn after(&mut self, manager: &PromiseManager, request: &Envelope, reply: &Envelope, now: u64);
}

#[derive(Debug, Error)]
enum PipelineError {
    #[error("injected fault at {0:?}")]
    Injected(PipelineStage),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Promise(#[from] PromiseError),
}

pub struct PromiseManager {
    catalog: ResourceCatalog,
    engine: PromiseEngine,
    handlers: BTreeMap<String, Arc<dyn ActionHandler>>,
    max_duration: u64,
    counters: Counters,
    fault: Option<PipelineStage>,
    observer: Option<Box<dyn Observer>>,
}

impl std::fmt::Debug for PromiseManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromiseManager")
            .field("catalog", &self.catalog)
            .field("promises", &self.engine.table().len())
            .field("handlers", &self.handlers.keys().collect::<Vec<_>>())
            .field("counters", &self.counters)
            .finish()
    }
}

impl PromiseManager {
    /// A manager with no handlers. Granted durations are capped at
    /// `max_duration`.
    pub fn new(catalog: ResourceCatalog, max_duration: u64) -> Self {
        Self {
            catalog,
            engine: PromiseEngine::new(),
            handlers: BTreeMap::new(),
            max_duration,
            counters: Counters::default(),
            fault: None,
            observer: None,
        }
    }

    /// A manager with the built-in handlers from [`standard_handlers`].
    pub fn with_standard_handlers(catalog: ResourceCatalog, max_duration: u64) -> Self {
        let mut m = Self::new(catalog, max_duration);
        for (name, h) in standard_handlers() {
            m.register_handler(name, h).expect("standard handler names are unique");
        }
        m
    }

    pub fn register_handler(
        &mut self,
        name: impl Into<String>,
        handler: Arc<dyn ActionHandler>,
    ) -> Result<(), ServiceError> {
        let name = name.into();
        if self.handlers.contains_key(&name) || name == TABLE_DUMP_ACTION {
            return Err(ServiceError::DuplicateHandler(name));
        }
        self.handlers.insert(name, handler);
        Ok(())
    }

    pub fn handler_names(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }

    pub fn catalog(&self) -> &ResourceCatalog {
        &self.catalog
    }

    pub fn engine(&self) -> &PromiseEngine {
        &self.engine
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn max_duration(&self) -> u64 {
        self.max_duration
    }

    /// Arms a one-shot fault for the next [`handle`](Self::handle) call.
    pub fn inject_fault(&mut self, stage: PipelineStage) {
        self.fault = Some(stage);
    }

    pub fn set_observer(&mut self, observer: Box<dyn Observer>) {
        self.observer = Some(observer);
    }

    pub fn take_observer(&mut self) -> Option<Box<dyn Observer>> {
        self.observer.take()
    }

    /// Hash of the catalog state and the promise table. Counters and the id
    /// allocator are not included.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.catalog.state_digest().as_bytes());
        h.update(b"/");
        h.update(self.engine.table().digest().as_bytes());
        hex::encode(h.finalize())
    }

    /// Processes one envelope and returns the reply envelope.
    pub fn handle(&mut self, request: &Envelope, now: u64) -> Envelope {
        let mut observer = self.observer.take();
        if let Some(o) = observer.as_mut() {
            o.before(self, request, now);
        }
        let reply = self.handle_inner(request, now);
        if let Some(o) = observer.as_mut() {
            o.after(self, request, &reply, now);
        }
        if self.observer.is_none() {
            self.observer = observer;
        }
        reply
    }

    fn handle_inner(&mut self, request: &Envelope, now: u64) -> Envelope {
        let fault = self.fault.take();
        if let Err(msg) = request.validate() {
            return Envelope::fault(FaultCode::MalformedMessage, msg);
        }
        let checkpoint = self.engine.table().clone();
        let counters = self.counters.clone();
        let token = match self.catalog.begin_unit() {
            Ok(t) => t,
            Err(e) => return Envelope::fault(FaultCode::InternalError, e.to_string()),
        };
        match self.run(request, now, &token, fault) {
            Ok(reply) => match self.catalog.commit_unit(token) {
                Ok(()) => reply,
                Err(e) => Envelope::fault(FaultCode::InternalError, e.to_string()),
            },
            Err(e) => {
                match e {
                    PipelineError::Injected(_) => log::debug!("request rolled back: {e}"),
                    _ => log::warn!("request rolled back: {e}"),
                }
                let _ = self.catalog.rollback_unit(token);
                self.engine.restore_table(checkpoint);
                self.counters = counters;
                self.counters.faults += 1;
                Envelope::fault(FaultCode::InternalError, e.to_string())
            }
        }
    }

    fn run(
        &mut self,
        request: &Envelope,
        now: u64,
        token: &UnitToken,
        fault: Option<PipelineStage>,
    ) -> Result<Envelope, PipelineError> {
        let trip = |stage: PipelineStage| -> Result<(), PipelineError> {
            if fault == Some(stage) {
                Err(PipelineError::Injected(stage))
            } else {
                Ok(())
            }
        };

        let expired = self.engine.expire_sweep(now);
        self.counters.expiries += expired.len() as u64;
        self.reconcile_tags(token)?;
        trip(PipelineStage::AfterSweep)?;

        let mut responses = Vec::new();
        if request.requests_iter().next().is_some() {
            let view = self.catalog.unit_view(token)?;
            for req in request.requests_iter() {
                responses.push(self.process_request(req, now, &view));
            }
            self.reconcile_tags(token)?;
        }
        trip(PipelineStage::AfterPromiseRequests)?;

        let action_result = match &request.action {
            Some(action) => Some(self.run_action(request, &action.name, &action.payload, token, &trip)?),
            None => None,
        };
        trip(PipelineStage::BeforeCommit)?;

        let mut reply = Envelope {
            action_result,
            ..Default::default()
        };
        if !responses.is_empty() || request.promise.is_some() {
            reply.promise = Some(PromisePart {
                promise_request: Vec::new(),
                promise_response: responses,
            });
        }
        if reply.promise.is_none() && reply.action_result.is_none() {
            // an envelope that only carried responses still gets an answer
            reply.promise = Some(PromisePart::default());
        }
        Ok(reply)
    }

    fn process_request(
        &mut self,
        req: &PromiseRequestMsg,
        now: u64,
        view: &AvailabilityView,
    ) -> PromiseResponseMsg {
        let duration = req.promise_duration.min(self.max_duration);
        let outcome = match &req.promise_identifier {
            Some(release) => {
                self.engine
                    .exchange(req.predicates.clone(), duration, release, now, view)
            }
            None => self
                .engine
                .grant(req.predicates.clone(), duration, now, view)
                .map(Some)
                .map_err(PromiseError::from),
        };
        let correlation = req.request_identifier.clone();
        match outcome {
            Ok(record) => {
                self.counters.grants += 1;
                PromiseResponseMsg {
                    promise_duration: if record.is_some() { duration } else { 0 },
                    promise_identifier: record.map(|r| r.id),
                    promise_result: PromiseResult::Accepted,
                    promise_correlation: correlation,
                    reason: None,
                }
            }
            Err(e) => {
                self.counters.rejections += 1;
                PromiseResponseMsg {
                    promise_identifier: None,
                    promise_result: PromiseResult::Rejected,
                    promise_duration: 0,
                    promise_correlation: correlation,
                    reason: Some(e.to_string()),
                }
            }
        }
    }

    fn run_action(
        &mut self,
        request: &Envelope,
        name: &str,
        payload: &Value,
        token: &UnitToken,
        trip: &dyn Fn(PipelineStage) -> Result<(), PipelineError>,
    ) -> Result<ActionResultMsg, PipelineError> {
        let result = |status, payload, reason| ActionResultMsg {
            name: name.to_owned(),
            status,
            payload,
            reason,
        };

        if name == TABLE_DUMP_ACTION {
            let dump = serde_json::to_value(self.engine.table().dump())
                .expect("table dump serializes");
            return Ok(result(ActionStatus::Succeeded, Some(dump), None));
        }
        let Some(handler) = self.handlers.get(name).cloned() else {
            self.counters.actions_failed += 1;
            return Ok(result(
                ActionStatus::UnknownAction,
                None,
                Some(format!("no handler registered for `{name}`")),
            ));
        };

        let env: Vec<(PromiseId, ReleaseOption)> = request
            .environment
            .iter()
            .flat_map(|e| e.entries())
            .collect();
        for (id, _) in &env {
            match self.engine.table().get(*id) {
                None => {
                    self.counters.actions_failed += 1;
                    return Ok(result(
                        ActionStatus::UnknownPromiseId,
                        None,
                        Some(format!("unknown promise {id}")),
                    ));
                }
                Some(r) if r.status != PromiseStatus::Active => {
                    self.counters.promise_expired += 1;
                    let why = match r.status {
                        PromiseStatus::Released => "was released",
                        _ => "has expired",
                    };
                    return Ok(result(
                        ActionStatus::PromiseExpired,
                        None,
                        Some(format!("promise {id} {why}")),
                    ));
                }
                Some(_) => {}
            }
        }
        let releasing: Vec<PromiseId> = env
            .iter()
            .filter(|(_, opt)| *opt == ReleaseOption::ReleaseAfterSuccess)
            .map(|(id, _)| *id)
            .collect();

        let savepoint = self.catalog.savepoint(token)?;
        let table_before = self.engine.table().clone();
        let table = self.engine.table();
        let protected = table.active_predicates_except(&releasing).cloned().collect();
        let covered = table
            .active()
            .filter(|r| releasing.contains(&r.id))
            .flat_map(|r| r.predicates.iter().cloned())
            .collect();

        let outcome = {
            let mut ctx = ActionContext::new(&mut self.catalog, token, protected, covered);
            handler.call(payload, &mut ctx)
        };
        trip(PipelineStage::AfterHandler)?;

        let value = match outcome {
            Ok(v) => v,
            Err(failure) => {
                self.catalog.rollback_to(token, savepoint)?;
                let status = if failure.kind == FailureKind::PromiseConflict {
                    self.counters.violations_rolled_back += 1;
                    ActionStatus::RejectedByPromiseViolation
                } else {
                    self.counters.actions_failed += 1;
                    ActionStatus::Failed
                };
                return Ok(result(status, None, Some(failure.to_string())));
            }
        };

        self.engine.release(&releasing)?;
        self.reconcile_tags(token)?;
        trip(PipelineStage::AfterRelease)?;

        let view = self.catalog.unit_view(token)?;
        let check = self.engine.post_action_check(&releasing, &view);
        trip(PipelineStage::AfterPostCheck)?;
        if check.is_err() {
            self.catalog.rollback_to(token, savepoint)?;
            self.engine.restore_table(table_before);
            self.counters.violations_rolled_back += 1;
            return Ok(result(
                ActionStatus::RejectedByPromiseViolation,
                None,
                Some("action would break an active promise".into()),
            ));
        }
        self.counters.actions_succeeded += 1;
        Ok(result(ActionStatus::Succeeded, Some(value), None))
    }

    /// Brings instance `promised` tags in line with the active Named
    /// predicates.
    fn reconcile_tags(&mut self, token: &UnitToken) -> Result<(), CatalogError> {
        let wanted = self.engine.table().named_instances();
        let view = self.catalog.unit_view(token)?;
        let mut changes = Vec::new();
        for rec in view.instances() {
            let tagged = wanted.contains(&rec.id);
            let next = match (rec.status, tagged) {
                (InstanceStatus::Available, true) => InstanceStatus::Promised,
                (InstanceStatus::Promised, false) => InstanceStatus::Available,
                _ => continue,
            };
            changes.push(Mutation::SetInstanceStatus {
                instance: rec.id.clone(),
                status: next,
            });
        }
        for m in changes {
            self.catalog.apply_mutation(token, m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
