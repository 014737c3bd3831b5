//! Random scenarios and a step-removal minimizer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::run::{run_script, RunReport, Transport};
use super::script::{
    ActionSpec, CatalogSource, ClientScript, EnvSpec, RequestSpec, ClockMode, ScenarioScript, Step,
};
use super::HarnessError;
use crate::catalog::{CatalogDocument, CatalogSchema, InstanceDoc, InstanceStatus, PropertyDomain, TypeDecl};
use crate::predicate::{InstanceId, Predicate, PropertyConstraint, Scalar};
use crate::protocol::ReleaseOption;
use crate::service::PipelineStage;

pub const GRADES: [&str; 3] = ["basic", "deluxe", "suite"];
const ROOMS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuzzOptions {
    pub seed: u64,
    pub clients: usize,
    pub steps: usize,
    /// Chance that a step carries an injected fault.
    pub fault_rate: f64,
    pub clock: ClockMode,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 4,
            steps: 50,
            fault_rate: 0.0,
            clock: ClockMode::Logical,
        }
    }
}

/// Small catalog with two pure pools and a handful of rooms, sized so the
/// exhaustive oracle stays cheap.
pub fn random_catalog(rng: &mut impl Rng) -> CatalogDocument {
    let room = TypeDecl::default()
        .with_property("floor", PropertyDomain::Int { min: Some(1), max: Some(3) })
        .with_property(
            "grade",
            PropertyDomain::Enum {
                values: GRADES.iter().map(|s| Scalar::from(*s)).collect(),
                ordered: true,
            },
        )
        .with_property("view", PropertyDomain::Bool);
    let schema = CatalogSchema::new()
        .with_type("widget", TypeDecl::default())
        .with_type("cash", TypeDecl::default())
        .with_type("room", room);
    let mut pools = BTreeMap::new();
    pools.insert("widget".into(), rng.gen_range(10..60));
    pools.insert("cash".into(), rng.gen_range(20..200));
    let instances = (0..ROOMS)
        .map(|k| {
            let mut properties = BTreeMap::new();
            properties.insert("floor".to_string(), Scalar::Int(rng.gen_range(1..=3)));
            properties.insert("grade".to_string(), Scalar::from(*GRADES.choose(rng).unwrap()));
            properties.insert("view".to_string(), Scalar::Bool(rng.gen_bool(0.5)));
            InstanceDoc {
                resource_type: "room".into(),
                key: format!("r{k}"),
                status: if rng.gen_bool(0.15) {
                    InstanceStatus::Taken
                } else {
                    InstanceStatus::Available
                },
                properties,
            }
        })
        .collect();
    CatalogDocument {
        types: schema,
        pools,
        instances,
    }
}

pub fn random_predicate(rng: &mut impl Rng) -> Predicate {
    match rng.gen_range(0..6) {
        0 => Predicate::quantity("widget", rng.gen_range(1..20)),
        1 => Predicate::quantity("cash", rng.gen_range(1..60)),
        2 => Predicate::quantity("room", rng.gen_range(1..3)),
        3 => Predicate::named(InstanceId::new("room", format!("r{}", rng.gen_range(0..ROOMS)))),
        _ => {
            let mut cs = Vec::new();
            if rng.gen_bool(0.6) {
                let f = rng.gen_range(1..=3i64);
                cs.push(if rng.gen_bool(0.5) {
                    PropertyConstraint::equals("floor", f)
                } else {
                    PropertyConstraint::at_least("floor", f)
                });
            }
            if rng.gen_bool(0.5) {
                cs.push(PropertyConstraint::at_least("grade", *GRADES.choose(rng).unwrap()));
            }
            if cs.is_empty() || rng.gen_bool(0.3) {
                cs.push(PropertyConstraint::equals("view", rng.gen_bool(0.5)));
            }
            Predicate::property("room", cs, rng.gen_range(1..3))
        }
    }
}

fn pick(rng: &mut impl Rng, labels: &[String]) -> Option<String> {
    labels.choose(rng).cloned()
}

fn random_step(rng: &mut impl Rng, client: usize, n: usize, labels: &mut Vec<String>) -> Step {
    let mut step = Step {
        think: rng.gen_range(0..4),
        ..Default::default()
    };
    match rng.gen_range(0..100) {
        0..=34 => {
            let label = format!("c{client}-{n}");
            let release = if rng.gen_bool(0.15) {
                pick(rng, labels).into_iter().collect()
            } else {
                Vec::new()
            };
            step.requests.push(RequestSpec {
                label: Some(label.clone()),
                predicates: (0..rng.gen_range(1..=2)).map(|_| random_predicate(rng)).collect(),
                duration: rng.gen_range(1..20),
                release,
                expect: None,
            });
            labels.push(label);
        }
        35..=54 => {
            let mut environment = Vec::new();
            // mostly the newest promise, which is the likeliest to be live
            let label = if rng.gen_bool(0.7) { labels.last().cloned() } else { pick(rng, labels) };
            if let Some(l) = label {
                environment.push(EnvSpec {
                    promise: l,
                    option: ReleaseOption::ReleaseAfterSuccess,
                });
            }
            step.action = Some(ActionSpec {
                name: "fulfil".into(),
                payload: json!({}),
                environment,
                expect: None,
            });
        }
        55..=69 => {
            let ty = if rng.gen_bool(0.5) { "widget" } else { "cash" };
            step.action = Some(ActionSpec {
                name: "purchase-stock".into(),
                payload: json!({"resource-type": ty, "amount": rng.gen_range(1..30)}),
                environment: Vec::new(),
                expect: None,
            });
        }
        70..=79 => {
            step.action = Some(ActionSpec {
                name: "take-instance".into(),
                payload: json!({"resource-type": "room", "key": format!("r{}", rng.gen_range(0..ROOMS))}),
                environment: Vec::new(),
                expect: None,
            });
        }
        80..=84 => {
            step.action = Some(ActionSpec {
                name: "restock".into(),
                payload: json!({"resource-type": "widget", "amount": rng.gen_range(1..10)}),
                environment: Vec::new(),
                expect: None,
            });
        }
        85..=89 => {
            step.action = Some(ActionSpec {
                name: "book".into(),
                payload: json!({ "predicates": [random_predicate(rng)] }),
                environment: Vec::new(),
                expect: None,
            });
        }
        90..=94 => match pick(rng, labels) {
            Some(l) => step.requests.push(RequestSpec {
                label: None,
                predicates: Vec::new(),
                duration: 1,
                release: vec![l],
                expect: None,
            }),
            None => {
                step.action = Some(ActionSpec {
                    name: "noop".into(),
                    payload: json!({}),
                    environment: Vec::new(),
                    expect: None,
                })
            }
        },
        _ => {
            let environment = pick(rng, labels)
                .map(|l| EnvSpec {
                    promise: l,
                    option: ReleaseOption::Retain,
                })
                .into_iter()
                .collect();
            step.action = Some(ActionSpec {
                name: "noop".into(),
                payload: json!({}),
                environment,
                expect: None,
            });
        }
    }
    // now and then the handler fails after doing its work
    if let Some(a) = &mut step.action {
        if a.name != "noop" && rng.gen_bool(0.05) {
            a.payload["fail"] = json!("injected");
        }
    }
    step
}

/// A random script: `clients` clients with `steps` steps each.
pub fn generate(opts: &FuzzOptions) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let catalog = random_catalog(&mut rng);
    let clients = (0..opts.clients)
        .map(|c| {
            let mut labels = Vec::new();
            let steps = (0..opts.steps)
                .map(|n| {
                    let mut s = random_step(&mut rng, c, n, &mut labels);
                    if s.sends_envelope() && opts.fault_rate > 0.0 && rng.gen_bool(opts.fault_rate) {
                        s.fault = Some(*PipelineStage::ALL.choose(&mut rng).unwrap());
                    }
                    s
                })
                .collect();
            ClientScript {
                name: format!("client-{c}"),
                start: 0,
                steps,
            }
        })
        .collect();
    ScenarioScript {
        name: format!("fuzz-{}", opts.seed),
        seed: opts.seed,
        clock: opts.clock,
        tick_millis: 1,
        max_promise_duration: 25,
        catalog: CatalogSource::Inline(catalog),
        clients,
    }
}

pub fn fuzz(opts: &FuzzOptions, transport: Transport) -> Result<(ScenarioScript, RunReport), HarnessError> {
    let script = generate(opts);
    let report = run_script(&script, Path::new("."), transport)?;
    Ok((script, report))
}

/// Greedily drops clients and steps while `fails` keeps returning true.
/// Candidates are replayed in-process under the logical clock.
pub fn minimize(
    script: &ScenarioScript,
    base_dir: &Path,
    fails: impl Fn(&RunReport) -> bool,
) -> Result<ScenarioScript, HarnessError> {
    let mut best = script.clone();
    best.clock = ClockMode::Logical;
    let still_fails = |s: &ScenarioScript| -> Result<bool, HarnessError> {
        if s.validate().is_err() {
            return Ok(false);
        }
        Ok(fails(&run_script(s, base_dir, Transport::InProcess)?))
    };
    if !still_fails(&best)? {
        return Ok(best);
    }
    let mut changed = true;
    while changed {
        changed = false;
        let mut c = best.clients.len();
        while c > 0 && best.clients.len() > 1 {
            c -= 1;
            let mut candidate = best.clone();
            candidate.clients.remove(c);
            if still_fails(&candidate)? {
                best = candidate;
                changed = true;
            }
        }
        for c in 0..best.clients.len() {
            let mut i = best.clients[c].steps.len();
            while i > 0 {
                i -= 1;
                let mut candidate = best.clone();
                let steps = &mut candidate.clients[c].steps;
                let removed = steps.remove(i);
                // keep later steps at the same times
                if let Some(next) = steps.get_mut(i) {
                    next.think += removed.think;
                }
                if still_fails(&candidate)? {
                    best = candidate;
                    changed = true;
                }
            }
        }
    }
    Ok(best)
}
