//! Scenario scripts. The format is documented in `docs/formats.md`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::catalog::{CatalogDocument, InstanceStatus, ResourceCatalog};
use crate::engine::PromiseStatus;
use crate::predicate::{Predicate, ResourceTypeId};
use crate::protocol::{ActionStatus, PromiseResult, ReleaseOption};
use crate::service::PipelineStage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Steps run one at a time, ordered by client-local time with seeded
    /// tie-breaks, and the manager clock is set to each step's time.
    /// Reproducible.
    #[default]
    Logical,
    /// Clients run concurrently against a wall clock and sleep through
    /// their think time. Only invariants are checked.
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogSource {
    Path(PathBuf),
    Inline(CatalogDocument),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clock: ClockMode,
    /// Length of one tick in wall mode.
    #[serde(default = "default_tick")]
    pub tick_millis: u64,
    #[serde(default = "default_max_duration")]
    pub max_promise_duration: u64,
    pub catalog: CatalogSource,
    pub clients: Vec<ClientScript>,
}

fn default_max_duration() -> u64 {
    3600
}

fn default_tick() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ClientScript {
    pub name: String,
    /// Local time of the client before its first step.
    #[serde(default)]
    pub start: u64,
    #[serde(default)]
    pub steps: Vec<Step>,
}

/// One envelope (or, with neither requests nor an action, just a pause and
/// some checks).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Step {
    /// Ticks the client waits before this step.
    #[serde(default)]
    pub think: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requests: Vec<RequestSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionSpec>,
    /// Fault to inject while this step is processed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<PipelineStage>,
    /// Evaluated against the manager right after the step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
}

impl Step {
    pub fn sends_envelope(&self) -> bool {
        !self.requests.is_empty() || self.action.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RequestSpec {
    /// Name the granted promise is bound to for later steps of this client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub predicates: Vec<Predicate>,
    pub duration: u64,
    /// Labels of promises to release if this request is granted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub release: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<PromiseResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ActionSpec {
    pub name: String,
    #[serde(default = "empty_object")]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub environment: Vec<EnvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<ActionStatus>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EnvSpec {
    pub promise: String,
    #[serde(default = "retain")]
    pub option: ReleaseOption,
}

fn retain() -> ReleaseOption {
    ReleaseOption::Retain
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    #[serde(rename_all = "kebab-case")]
    QuantityOnHand {
        resource_type: ResourceTypeId,
        equals: u64,
    },
    ActivePromises(usize),
    #[serde(rename_all = "kebab-case")]
    InstanceStatus {
        resource_type: ResourceTypeId,
        key: String,
        equals: InstanceStatus,
    },
    #[serde(rename_all = "kebab-case")]
    PromiseStatus {
        promise: String,
        equals: PromiseStatus,
    },
}

impl ScenarioScript {
    /// Parses and validates a script.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let script: Self = toml::from_str(text).map_err(|e| HarnessError::Script(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Script(format!("{}: {e}", path.display())))?;
        let script = Self::parse(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((script, dir))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Script(e.to_string()))
    }

    /// Checks that names are unique and that every label is bound by an
    /// earlier request of the same client before it is used.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Script(format!("{}: {msg}", self.name)));
        if self.clients.is_empty() {
            return bad("no clients".into());
        }
        if self.tick_millis == 0 {
            return bad("tick-millis must be positive".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.clients {
            if !names.insert(&c.name) {
                return bad(format!("duplicate client `{}`", c.name));
            }
            let mut labels = BTreeSet::new();
            for (i, step) in c.steps.iter().enumerate() {
                let at = format!("client `{}` step {}", c.name, i + 1);
                let mut ids = BTreeSet::new();
                for r in &step.requests {
                    if r.predicates.is_empty() && r.release.is_empty() {
                        return bad(format!("{at}: request has no predicates and releases nothing"));
                    }
                    for l in &r.release {
                        if !labels.contains(l) {
                            return bad(format!("{at}: release of unbound label `{l}`"));
                        }
                    }
                    if let Some(l) = &r.label {
                        if !ids.insert(l) {
                            return bad(format!("{at}: label `{l}` bound twice in one step"));
                        }
                    }
                }
                if let Some(a) = &step.action {
                    for e in &a.environment {
                        if !labels.contains(&e.promise) {
                            return bad(format!("{at}: environment names unbound label `{}`", e.promise));
                        }
                    }
                }
                labels.extend(step.requests.iter().filter_map(|r| r.label.clone()));
                for check in &step.checks {
                    if let Check::PromiseStatus { promise, .. } = check {
                        if !labels.contains(promise) {
                            return bad(format!("{at}: check names unbound label `{promise}`"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.clients.iter().map(|c| c.steps.len()).sum()
    }

    pub fn load_catalog(&self, base_dir: &Path) -> Result<ResourceCatalog, HarnessError> {
        match &self.catalog {
            CatalogSource::Inline(doc) => Ok(ResourceCatalog::from_document(doc.clone())?),
            CatalogSource::Path(p) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| HarnessError::Script(format!("{}: {e}", path.display())))?;
                Ok(ResourceCatalog::load_catalog(&text)?)
            }
        }
    }
}
