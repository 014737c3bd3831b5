//! Invariants checked around every request the manager handles.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::catalog::{AvailabilityView, InstanceStatus, PoolRecord};
use crate::engine::oracle::exhaustive_satisfiable;
use crate::engine::{check_satisfiable, PromiseEngine, PromiseId, PromiseStatus, PromiseTable, Rejection};
use crate::predicate::Predicate;
use crate::protocol::{ActionStatus, Envelope, PromiseResult, ReleaseOption};
use crate::service::{Counters, Observer, PromiseManager};

pub const TABLE_FEASIBLE: &str = "table-feasible";
pub const ORACLE_AGREES: &str = "oracle-agrees";
pub const POOL_ADDITIVITY: &str = "pool-additivity";
pub const NAMED_EXCLUSIVITY: &str = "named-exclusivity";
pub const ISOLATION: &str = "isolation";
pub const VIOLATION_COUNTER: &str = "violation-counter";
pub const FAULT_ATOMICITY: &str = "fault-atomicity";
pub const EXPIRY: &str = "expiry-correctness";
pub const RELEASE_CONDITIONAL: &str = "release-after-success";
pub const ACTION_ATOMICITY: &str = "action-atomicity";

pub const ALL: [&str; 10] = [
    TABLE_FEASIBLE,
    ORACLE_AGREES,
    POOL_ADDITIVITY,
    NAMED_EXCLUSIVITY,
    ISOLATION,
    VIOLATION_COUNTER,
    FAULT_ATOMICITY,
    EXPIRY,
    RELEASE_CONDITIONAL,
    ACTION_ATOMICITY,
];

/// Oracle comparisons are skipped above these sizes.
const ORACLE_MAX_INSTANCES: usize = 10;
const ORACLE_MAX_PREDICATES: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InvariantTally {
    pub checked: u64,
    pub failed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl InvariantTally {
    pub(crate) fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
            if self.failures.len() < 5 {
                self.failures.push(detail());
            }
        }
    }
}

pub type InvariantLog = BTreeMap<String, InvariantTally>;

struct Before {
    digest: String,
    table: PromiseTable,
    view: Arc<AvailabilityView>,
    counters: Counters,
}

/// Observer that checks every invariant on each request and tallies the
/// results into a shared log.
pub struct InvariantObserver {
    log: Arc<Mutex<InvariantLog>>,
    before: Option<Before>,
}

impl InvariantObserver {
    pub fn new() -> (Self, Arc<Mutex<InvariantLog>>) {
        let log: Arc<Mutex<InvariantLog>> = Arc::new(Mutex::new(
            ALL.iter().map(|n| (n.to_string(), InvariantTally::default())).collect(),
        ));
        (
            Self {
                log: log.clone(),
                before: None,
            },
            log,
        )
    }
}

impl Observer for InvariantObserver {
    fn before(&mut self, m: &PromiseManager, _request: &Envelope, _now: u64) {
        self.before = Some(Before {
            digest: m.state_digest(),
            table: m.engine().table().clone(),
            view: m.catalog().snapshot_availability(),
            counters: m.counters().clone(),
        });
    }

    fn after(&mut self, m: &PromiseManager, request: &Envelope, reply: &Envelope, now: u64) {
        let Some(before) = self.before.take() else { return };
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let mut tally = |name: &str, ok: bool, detail: &dyn Fn() -> String| {
            log.get_mut(name).expect("known invariant").record(ok, detail);
        };

        let view = m.catalog().snapshot_availability();
        let table = m.engine().table();

        let committed: Vec<Predicate> = table.active().flat_map(|r| r.predicates.iter().cloned()).collect();
        let mut feasible = m.engine().is_consistent(&view);
        if view.instance_count() <= ORACLE_MAX_INSTANCES && committed.len() <= ORACLE_MAX_PREDICATES {
            feasible &= exhaustive_satisfiable(&committed, &view);
        }
        tally(TABLE_FEASIBLE, feasible, &|| {
            format!("t={now}: active promises unsatisfiable on committed state")
        });

        let pools = table.pool_additivity_violations(&view);
        tally(POOL_ADDITIVITY, pools.is_empty(), &|| format!("t={now}: {pools:?}"));

        let named = table.named_exclusivity_violations();
        tally(NAMED_EXCLUSIVITY, named.is_empty(), &|| format!("t={now}: {named:?}"));

        if reply.fault.is_some() {
            let digest = m.state_digest();
            tally(FAULT_ATOMICITY, digest == before.digest, &|| {
                format!("t={now}: state changed across a fault")
            });
            return;
        }

        // what the sweep at the start of the request should have done
        let mut sweeper = PromiseEngine::new();
        sweeper.restore_table(before.table.clone());
        sweeper.expire_sweep(now);
        let swept = sweeper.table();

        let early = table
            .records()
            .filter(|r| r.status == PromiseStatus::Expired)
            .filter(|r| r.expires_at > now)
            .map(|r| r.id)
            .collect::<Vec<_>>();
        let late = table
            .active()
            .filter(|r| r.expires_at <= now)
            .map(|r| r.id)
            .collect::<Vec<_>>();
        tally(EXPIRY, early.is_empty() && late.is_empty(), &|| {
            format!("t={now}: expired early {early:?}, still active {late:?}")
        });

        if let Some(result) = &reply.action_result {
            let env: Vec<PromiseId> = request
                .environment
                .iter()
                .flat_map(|e| e.promise_identifier.iter().copied())
                .collect();
            let all_active = env
                .iter()
                .all(|id| swept.get(*id).is_some_and(|r| r.is_active()));
            let known = env.iter().all(|id| swept.get(*id).is_some());
            if result.status == ActionStatus::PromiseExpired {
                tally(EXPIRY, known && !all_active, &|| {
                    format!("t={now}: promise-expired reported for live promises {env:?}")
                });
            }
            let succeeded = result.status == ActionStatus::Succeeded;
            // ids the envelope's own requests release are judged by the requests
            let exchanged: Vec<PromiseId> = request
                .requests_iter()
                .flat_map(|r| r.promise_identifier.iter().flatten().copied())
                .collect();
            if let Some(e) = &request.environment {
                let conditional = e
                    .promise_identifier
                    .iter()
                    .zip(&e.release_options)
                    .filter(|(id, o)| **o == ReleaseOption::ReleaseAfterSuccess && !exchanged.contains(id))
                    .map(|(id, _)| *id);
                for id in conditional {
                    let was = swept.get(id).map(|r| r.status);
                    let now_status = table.get(id).map(|r| r.status);
                    let ok = match (succeeded, was) {
                        (true, Some(PromiseStatus::Active)) => now_status == Some(PromiseStatus::Released),
                        // unchanged apart from the sweep
                        _ => now_status == was,
                    };
                    tally(RELEASE_CONDITIONAL, ok, &|| {
                        format!("t={now}: promise {id:?} went {was:?} -> {now_status:?}, action {:?}", result.status)
                    });
                }
            }
            // an action that did not succeed leaves only the sweep's traces
            if result.status != ActionStatus::Succeeded && request.promise.is_none() {
                let held = swept.named_instances();
                let pools_before: Vec<PoolRecord> = before.view.pools().collect();
                let pools_after: Vec<PoolRecord> = view.pools().collect();
                let stray: Vec<String> = before
                    .view
                    .instances()
                    .filter(|b| {
                        let a = view.instance(&b.id);
                        let swept_tag = b.status == InstanceStatus::Promised
                            && !held.contains(&b.id)
                            && a.is_some_and(|a| a.status == InstanceStatus::Available);
                        a.is_none_or(|a| a.properties != b.properties || (a.status != b.status && !swept_tag))
                    })
                    .map(|b| b.id.to_string())
                    .collect();
                let ok = pools_before == pools_after && stray.is_empty() && table == swept;
                tally(ACTION_ATOMICITY, ok, &|| {
                    format!("t={now}: {:?} action left changes (instances {stray:?})", result.status)
                });
            }
            // an action cashing in its own promises must not be refused
            let payload_fails = request
                .action
                .as_ref()
                .is_some_and(|a| a.payload.get("fail").is_some());
            if result.name == "fulfil" && all_active && !env.is_empty() && !payload_fails {
                tally(ISOLATION, result.status == ActionStatus::Succeeded, &|| {
                    format!("t={now}: fulfil under live promises {env:?} got {:?}", result.status)
                });
            }
        }

        let violations = m.counters().violations_rolled_back - before.counters.violations_rolled_back;
        let reported = u64::from(
            reply
                .action_result
                .as_ref()
                .is_some_and(|r| r.status == ActionStatus::RejectedByPromiseViolation),
        );
        tally(VIOLATION_COUNTER, violations == reported, &|| {
            format!("t={now}: counter moved by {violations}, reply reported {reported}")
        });

        // replay each promise decision against the pre-request state
        let small = before.view.instance_count() <= ORACLE_MAX_INSTANCES;
        let mut active: Vec<(PromiseId, Vec<Predicate>)> = swept
            .active()
            .map(|r| (r.id, r.predicates.clone()))
            .collect();
        for (req, resp) in request.requests_iter().zip(reply.responses()) {
            let releases: Vec<PromiseId> = req.promise_identifier.clone().unwrap_or_default();
            let remaining: Vec<Predicate> = active
                .iter()
                .filter(|(id, _)| !releases.contains(id))
                .flat_map(|(_, ps)| ps.iter().cloned())
                .chain(req.predicates.iter().cloned())
                .collect();
            let decided_on_feasibility = match resp.promise_result {
                PromiseResult::Accepted => true,
                PromiseResult::Rejected => {
                    resp.reason.as_deref() == Some(&Rejection::Unsatisfiable.to_string())
                }
            };
            if decided_on_feasibility && !req.predicates.is_empty() {
                let accepted = resp.promise_result == PromiseResult::Accepted;
                let solver = check_satisfiable(&remaining, &before.view);
                if small && remaining.len() <= ORACLE_MAX_PREDICATES {
                    let oracle = exhaustive_satisfiable(&remaining, &before.view);
                    tally(ORACLE_AGREES, oracle == accepted && solver == accepted, &|| {
                        format!(
                            "t={now}: request `{}` {} but oracle says {oracle}",
                            req.request_identifier,
                            if accepted { "accepted" } else { "rejected" }
                        )
                    });
                } else {
                    tally(ORACLE_AGREES, solver == accepted, &|| {
                        format!("t={now}: request `{}` decided against the solver", req.request_identifier)
                    });
                }
            }
            if resp.promise_result == PromiseResult::Accepted {
                active.retain(|(id, _)| !releases.contains(id));
                if let Some(id) = resp.promise_identifier {
                    active.push((id, req.predicates.clone()));
                }
            }
        }
    }
}

pub fn all_held(log: &InvariantLog) -> bool {
    log.values().all(|t| t.failed == 0)
}
