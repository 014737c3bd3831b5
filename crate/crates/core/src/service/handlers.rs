//! Action handlers and the context they run in.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::catalog::{
    AvailabilityView, CatalogError, InstanceStatus, Mutation, ResourceCatalog, UnitToken,
};
use crate::engine::{FeasibilityProblem, SupplyUnit};
use crate::predicate::{InstanceId, Predicate, ResourceTypeId, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    /// The resources the action wants are not there.
    ResourceUnavailable,
    /// The resources are there but held for someone else's promise.
    PromiseConflict,
    BadPayload,
    /// Application-level failure after the action had started.
    HandlerFailed,
}

impl FailureKind {
    pub fn code(self) -> &'static str {
        match self {
            FailureKind::ResourceUnavailable => "resource-unavailable",
            FailureKind::PromiseConflict => "promise-conflict",
            FailureKind::BadPayload => "bad-payload",
            FailureKind::HandlerFailed => "handler-failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl ActionFailure {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for ActionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.code(), self.message)
    }
}

impl From<CatalogError> for ActionFailure {
    fn from(e: CatalogError) -> Self {
        let kind = match e {
            CatalogError::PoolUnderflow { .. } | CatalogError::IllegalStatusTransition { .. } => {
                FailureKind::ResourceUnavailable
            }
            CatalogError::UnknownResource(_) | CatalogError::NotAPool(_) | CatalogError::SchemaViolation(_) => {
                FailureKind::BadPayload
            }
            _ => FailureKind::HandlerFailed,
        };
        ActionFailure::new(kind, e.to_string())
    }
}

/// What a handler may touch while it runs. Every mutation goes into the
/// request's catalog unit and is undone if the action fails or breaks a
/// promise.
pub struct ActionContext<'a> {
    catalog: &'a mut ResourceCatalog,
    token: &'a UnitToken,
    protected: Vec<Predicate>,
    covered: Vec<Predicate>,
}

impl<'a> ActionContext<'a> {
    pub(crate) fn new(
        catalog: &'a mut ResourceCatalog,
        token: &'a UnitToken,
        protected: Vec<Predicate>,
        covered: Vec<Predicate>,
    ) -> Self {
        Self {
            catalog,
            token,
            protected,
            covered,
        }
    }

    /// The catalog as this action currently sees it, own changes included.
    pub fn view(&self) -> Result<AvailabilityView, ActionFailure> {
        Ok(self.catalog.unit_view(self.token)?)
    }

    pub fn apply(&mut self, m: Mutation) -> Result<(), ActionFailure> {
        Ok(self.catalog.apply_mutation(self.token, m)?)
    }

    /// Predicates of the promises this action will release on success,
    /// i.e. what the caller was promised and is now cashing in.
    pub fn covered_predicates(&self) -> &[Predicate] {
        &self.covered
    }

    /// Consumes resources matching `wanted` without starving any other
    /// active promise. Instances are chosen by the same matching the engine
    /// uses, so a caller holding a promise always gets what it was promised.
    /// Returns the instances taken for each predicate (empty for pools).
    pub fn take_matching(&mut self, wanted: &[Predicate]) -> Result<Vec<Vec<InstanceId>>, ActionFailure> {
        let view = self.view()?;
        let all: Vec<&Predicate> = self.protected.iter().chain(wanted).collect();
        let assignment = match FeasibilityProblem::build(all.iter().copied(), &view).solve() {
            Some(a) => a,
            None => {
                let kind = if FeasibilityProblem::build(wanted, &view).is_satisfiable() {
                    FailureKind::PromiseConflict
                } else {
                    FailureKind::ResourceUnavailable
                };
                let list = wanted.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
                return Err(ActionFailure::new(kind, format!("cannot take {list}")));
            }
        };
        let base = self.protected.len();
        let mut taken = Vec::with_capacity(wanted.len());
        for i in 0..wanted.len() {
            let mut ids = Vec::new();
            for (unit, n) in &assignment.per_demand[base + i] {
                match unit {
                    SupplyUnit::Pool(ty) => self.apply(Mutation::DecrementPool {
                        resource_type: ty.clone(),
                        amount: *n,
                    })?,
                    SupplyUnit::Instance(id) => {
                        self.apply(Mutation::SetInstanceStatus {
                            instance: id.clone(),
                            status: InstanceStatus::Taken,
                        })?;
                        ids.push(id.clone());
                    }
                }
            }
            taken.push(ids);
        }
        Ok(taken)
    }
}

pub trait ActionHandler: Send + Sync {
    fn call(&self, payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure>;
}

impl<F> ActionHandler for F
where
    F: Fn(&Value, &mut ActionContext<'_>) -> Result<Value, ActionFailure> + Send + Sync,
{
    fn call(&self, payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
        self(payload, ctx)
    }
}

fn parse<T: DeserializeOwned>(payload: &Value) -> Result<T, ActionFailure> {
    T::deserialize(payload).map_err(|e| ActionFailure::new(FailureKind::BadPayload, e.to_string()))
}

/// `"fail": "why"` in any standard payload makes the handler fail after it
/// has done its work, to exercise rollback.
fn fail_if_asked(payload: &Value) -> Result<(), ActionFailure> {
    match payload.get("fail") {
        Some(Value::String(why)) => Err(ActionFailure::new(FailureKind::HandlerFailed, why.clone())),
        Some(Value::Bool(true)) => Err(ActionFailure::new(FailureKind::HandlerFailed, "requested failure")),
        _ => Ok(()),
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Amount {
    resource_type: ResourceTypeId,
    amount: u64,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct InstanceRef {
    resource_type: ResourceTypeId,
    key: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct PropertyUpdate {
    resource_type: ResourceTypeId,
    key: String,
    property: String,
    value: Scalar,
}

#[derive(Deserialize)]
struct Book {
    predicates: Vec<Predicate>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct BuyPainting {
    key: String,
    #[serde(default = "yes")]
    shipper_available: bool,
}

fn yes() -> bool {
    true
}

/// Removes stock. Pure pools are decremented directly, so a purchase that
/// eats into promised stock is caught by the post-action check; instance
/// types go through [`ActionContext::take_matching`].
fn consume(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let a: Amount = parse(payload)?;
    let view = ctx.view()?;
    if view.is_pure_pool(&a.resource_type) {
        ctx.apply(Mutation::DecrementPool {
            resource_type: a.resource_type.clone(),
            amount: a.amount,
        })?;
        fail_if_asked(payload)?;
        return Ok(json!({ "consumed": a.amount }));
    }
    let taken = ctx.take_matching(&[Predicate::quantity(a.resource_type, a.amount)])?;
    fail_if_asked(payload)?;
    Ok(json!({ "taken": taken[0] }))
}

fn restock(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let a: Amount = parse(payload)?;
    ctx.apply(Mutation::IncrementPool {
        resource_type: a.resource_type,
        amount: a.amount,
    })?;
    fail_if_asked(payload)?;
    Ok(json!({ "added": a.amount }))
}

/// Takes one instance directly, whoever it may be promised to.
fn take_instance(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let r: InstanceRef = parse(payload)?;
    let id = InstanceId::new(r.resource_type, r.key);
    ctx.apply(Mutation::SetInstanceStatus {
        instance: id.clone(),
        status: InstanceStatus::Taken,
    })?;
    fail_if_asked(payload)?;
    Ok(json!({ "taken": id }))
}

fn book(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let b: Book = parse(payload)?;
    let taken = ctx.take_matching(&b.predicates)?;
    fail_if_asked(payload)?;
    Ok(json!({ "taken": taken }))
}

/// Consumes exactly what the released-after-success promises cover.
fn fulfil(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let wanted = ctx.covered_predicates().to_vec();
    let taken = ctx.take_matching(&wanted)?;
    fail_if_asked(payload)?;
    Ok(json!({ "taken": taken }))
}

fn set_property(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let u: PropertyUpdate = parse(payload)?;
    ctx.apply(Mutation::SetProperty {
        instance: InstanceId::new(u.resource_type, u.key),
        property: u.property,
        value: u.value,
    })?;
    fail_if_asked(payload)?;
    Ok(Value::Null)
}

/// Takes a painting, then fails if no shipper can be found, leaving the
/// painting where it was.
fn buy_painting(payload: &Value, ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    let b: BuyPainting = parse(payload)?;
    let id = InstanceId::new("painting", b.key);
    ctx.take_matching(&[Predicate::named(id.clone())])?;
    if !b.shipper_available {
        return Err(ActionFailure::new(FailureKind::HandlerFailed, "no shipper available"));
    }
    Ok(json!({ "bought": id }))
}

fn noop(payload: &Value, _ctx: &mut ActionContext<'_>) -> Result<Value, ActionFailure> {
    fail_if_asked(payload)?;
    Ok(Value::Null)
}

/// The built-in handlers, keyed by action name.
pub fn standard_handlers() -> BTreeMap<&'static str, Arc<dyn ActionHandler>> {
    let mut m: BTreeMap<&'static str, Arc<dyn ActionHandler>> = BTreeMap::new();
    m.insert("purchase-stock", Arc::new(consume));
    m.insert("consume", Arc::new(consume));
    m.insert("restock", Arc::new(restock));
    m.insert("take-instance", Arc::new(take_instance));
    m.insert("book", Arc::new(book));
    m.insert("fulfil", Arc::new(fulfil));
    m.insert("set-property", Arc::new(set_property));
    m.insert("buy-painting", Arc::new(buy_painting));
    m.insert("noop", Arc::new(noop));
    m
}
