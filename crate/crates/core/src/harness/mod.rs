//! Scenario harness: scripted and random clients driving a real manager,
//! with every invariant checked after each request.
//!
//! Scripts are TOML (see `docs/formats.md`). Under the logical clock the
//! harness picks the next step by earliest client-local time, breaking ties
//! with a seeded RNG, and sets the manager clock to that time, so a script
//! and a seed always produce the same report digest. Under the wall clock
//! clients run freely and only invariants are checked.

mod fuzz;
mod invariants;
mod run;
mod script;

use thiserror::Error;

use crate::catalog::CatalogError;
use crate::protocol::ProtocolError;
use crate::service::ServiceError;

pub use fuzz::{fuzz, generate, minimize, random_catalog, random_predicate, FuzzOptions, GRADES};
pub use invariants::{all_held, InvariantLog, InvariantObserver, InvariantTally, ALL as INVARIANTS};
pub use run::{run_script, ClientReport, RunReport, Transport};
pub use script::{
    ActionSpec, CatalogSource, Check, ClientScript, EnvSpec, RequestSpec, ClockMode, ScenarioScript,
    Step,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("script: {0}")]
    Script(String),
    /// The script refers to actions or catalog entries that do not exist.
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("client worker `{0}` stopped")]
    Worker(String),
}

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("merchant-race", include_str!("../../scenarios/merchant-race.toml")),
    ("ordering", include_str!("../../scenarios/ordering.toml")),
    ("hotel", include_str!("../../scenarios/hotel.toml")),
    ("banking", include_str!("../../scenarios/banking.toml")),
    ("travel", include_str!("../../scenarios/travel.toml")),
    ("gallery", include_str!("../../scenarios/gallery.toml")),
];

pub fn bundled(name: &str) -> Option<Result<ScenarioScript, HarnessError>> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScenarioScript::parse(text))
}
