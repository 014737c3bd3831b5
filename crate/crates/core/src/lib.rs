//! A promise manager: clients ask for time-bounded guarantees that
//! predicates over shared resources will keep holding, then run actions
//! under those guarantees.
//!
//! * [`predicate`]: the three predicate forms and their evaluation.
//! * [`catalog`]: the resource store with undo-logged mutation units.
//! * [`engine`]: the promise table and the feasibility check that decides
//!   whether a set of promises can all be honoured at once.
//! * [`protocol`]: message types and the framed JSON wire format.
//! * [`service`]: the request pipeline, action handlers, and TCP server.
//! * [`harness`]: scripted and randomized client scenarios with invariant
//!   checking.

pub mod catalog;
pub mod engine;
pub mod harness;
pub mod predicate;
pub mod protocol;
pub mod service;

pub use catalog::{
    AvailabilityView, CatalogDocument, CatalogError, CatalogSchema, InstanceRecord,
    InstanceStatus, Mutation, PropertyDomain, ResourceCatalog, TypeDecl,
};
pub use engine::{
    check_satisfiable, PromiseEngine, PromiseId, PromiseRecord, PromiseStatus, PromiseTable,
    Rejection,
};
pub use predicate::{
    satisfies, validate_predicate, Comparator, InstanceId, Predicate, PredicateError,
    PropertyConstraint, ResourceTypeId, Scalar,
};


pub use protocol::{decode, encode, Envelope};
pub use service::{PromiseManager, ServiceConfig};
