use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::invariants::{all_held, InvariantLog, InvariantObserver, VIOLATION_COUNTER};
use super::script::{Check, ClockMode, ScenarioScript, Step};
use super::HarnessError;
use crate::engine::PromiseId;
use crate::predicate::{InstanceId, Predicate};
use crate::protocol::{
    encode, ActionStatus, EnvironmentMsg, Envelope, FaultCode, PromiseRequestMsg, PromiseResult,
    ProtocolError,
};
use crate::service::{
    serve, Client, Clock, Counters, ManualClock, PromiseManager, ServerHandle, SharedManager, WallClock,
    TABLE_DUMP_ACTION,
};

/// Stands in for a label whose request was rejected; the manager reports it
/// as an unknown promise.
const UNBOUND: PromiseId = PromiseId(u64::MAX);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Transport {
    /// Each client is a thread with its own TCP connection to a server on
    /// a loopback port.
    #[default]
    Tcp,
    /// Clients call the manager directly. Same pipeline, no sockets.
    InProcess,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClientReport {
    pub name: String,
    pub steps: usize,
    pub accepted: u64,
    pub rejected: u64,
    pub actions: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub clock: ClockMode,
    pub steps_run: usize,
    pub envelopes: u64,
    pub faults: u64,
    pub clients: Vec<ClientReport>,
    pub counters: Counters,
    pub invariants: InvariantLog,
    pub expectation_failures: Vec<String>,
    pub final_state_digest: String,
    /// Hash of the schedule and every reply. Identical across runs of the
    /// same script under the logical clock.
    pub digest: String,
}

impl RunReport {
    pub fn invariants_held(&self) -> bool {
        all_held(&self.invariants)
    }

    pub fn passed(&self) -> bool {
        self.invariants_held() && self.expectation_failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} (seed {}, {:?}): {} steps, {} envelopes, {} faults\n",
            self.name, self.seed, self.clock, self.steps_run, self.envelopes, self.faults
        );
        for (name, t) in &self.invariants {
            let mark = if t.failed == 0 { "ok  " } else { "FAIL" };
            out.push_str(&format!("  {mark} {name}: {} checked, {} failed\n", t.checked, t.failed));
            for f in &t.failures {
                out.push_str(&format!("         {f}\n"));
            }
        }
        for f in &self.expectation_failures {
            out.push_str(&format!("  FAIL expectation: {f}\n"));
        }
        out.push_str(&format!("  digest {}\n", self.digest));
        out
    }
}

/// Per-client bookkeeping: label bindings and tallies.
#[derive(Default)]
struct ClientState {
    labels: BTreeMap<String, PromiseId>,
    time: u64,
    next: usize,
    report: ClientReport,
}

impl ClientState {
    fn resolve(&self, label: &str) -> PromiseId {
        self.labels.get(label).copied().unwrap_or(UNBOUND)
    }

    fn envelope(&self, client: &str, index: usize, step: &Step) -> Envelope {
        let requests: Vec<PromiseRequestMsg> = step
            .requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = format!("{client}-{}-{}", index + 1, i + 1);
                let mut msg = PromiseRequestMsg::new(id, r.predicates.clone(), r.duration);
                if !r.release.is_empty() {
                    msg = msg.releasing(r.release.iter().map(|l| self.resolve(l)).collect());
                }
                msg
            })
            .collect();
        let mut env = if requests.is_empty() {
            Envelope::default()
        } else {
            Envelope::requests(requests)
        };
        if let Some(a) = &step.action {
            env = env.with_action(a.name.clone(), a.payload.clone());
            if !a.environment.is_empty() {
                env = env.with_environment(EnvironmentMsg::new(
                    a.environment.iter().map(|e| (self.resolve(&e.promise), e.option)),
                ));
            }
        }
        env
    }

    /// Binds labels from the reply and reports unmet expectations.
    fn absorb(&mut self, at: &str, step: &Step, reply: &Envelope, failures: &mut Vec<String>) {
        self.report.steps += 1;
        if let Some(f) = &reply.fault {
            if step.fault.is_none() || f.code != FaultCode::InternalError {
                failures.push(format!("{at}: unexpected fault {:?}: {}", f.code, f.message));
            }
            return;
        }
        for (spec, resp) in step.requests.iter().zip(reply.responses()) {
            match resp.promise_result {
                PromiseResult::Accepted => self.report.accepted += 1,
                PromiseResult::Rejected => self.report.rejected += 1,
            }
            if let Some(label) = &spec.label {
                match resp.promise_identifier {
                    Some(id) => {
                        self.labels.insert(label.clone(), id);
                    }
                    None => {
                        self.labels.remove(label);
                    }
                }
            }
            if let Some(want) = spec.expect {
                if want != resp.promise_result {
                    failures.push(format!(
                        "{at}: request {} expected {want:?}, got {:?} ({})",
                        spec.label.as_deref().unwrap_or("(unlabelled)"),
                        resp.promise_result,
                        resp.reason.as_deref().unwrap_or("no reason")
                    ));
                }
            }
        }
        if let (Some(spec), Some(result)) = (&step.action, &reply.action_result) {
            *self.report.actions.entry(status_name(result.status)).or_default() += 1;
            if let Some(want) = spec.expect {
                if want != result.status {
                    failures.push(format!(
                        "{at}: action {} expected {want:?}, got {:?} ({})",
                        spec.name,
                        result.status,
                        result.reason.as_deref().unwrap_or("no reason")
                    ));
                }
            }
        }
    }

    fn check(&self, m: &PromiseManager, check: &Check) -> Result<(), String> {
        let view = m.catalog().snapshot_availability();
        match check {
            Check::QuantityOnHand {
                resource_type,
                equals,
            } => {
                let got = view.quantity_on_hand(resource_type);
                (got == Some(*equals))
                    .then_some(())
                    .ok_or_else(|| format!("{resource_type} on hand is {got:?}, expected {equals}"))
            }
            Check::ActivePromises(n) => {
                let got = m.engine().table().active_count();
                (got == *n)
                    .then_some(())
                    .ok_or_else(|| format!("{got} active promises, expected {n}"))
            }
            Check::InstanceStatus {
                resource_type,
                key,
                equals,
            } => {
                let id = InstanceId::new(resource_type.clone(), key.clone());
                let got = view.instance(&id).map(|r| r.status);
                (got == Some(*equals))
                    .then_some(())
                    .ok_or_else(|| format!("{id} is {got:?}, expected {equals:?}"))
            }
            Check::PromiseStatus { promise, equals } => {
                let got = m.engine().table().get(self.resolve(promise)).map(|r| r.status);
                (got == Some(*equals))
                    .then_some(())
                    .ok_or_else(|| format!("promise {promise} is {got:?}, expected {equals:?}"))
            }
        }
    }
}

fn status_name(s: ActionStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// One client's way of reaching the manager.
enum Link {
    Tcp(Client),
    Local(SharedManager, Arc<dyn Clock>),
}

impl Link {
    fn call(&mut self, env: &Envelope) -> Result<Envelope, HarnessError> {
        match self {
            Link::Tcp(c) => match c.call(env) {
                Ok(reply) => Ok(reply),
                Err(ProtocolError::InvariantViolation(msg)) => {
                    Ok(Envelope::fault(FaultCode::MalformedMessage, msg))
                }
                Err(e) => Err(e.into()),
            },
            Link::Local(m, clock) => {
                let mut m = m.lock().unwrap_or_else(|e| e.into_inner());
                let now = clock.now();
                Ok(m.handle(env, now))
            }
        }
    }
}

struct Rig {
    manager: SharedManager,
    clock: Arc<dyn Clock>,
    /// Set under the logical clock.
    manual: Option<Arc<ManualClock>>,
    log: Arc<Mutex<InvariantLog>>,
    server: Option<ServerHandle>,
}

impl Rig {
    fn new(script: &ScenarioScript, base_dir: &Path, transport: Transport) -> Result<Self, HarnessError> {
        let catalog = script.load_catalog(base_dir)?;
        let mut manager = PromiseManager::with_standard_handlers(catalog, script.max_promise_duration);
        check_references(script, &manager)?;
        let (observer, log) = InvariantObserver::new();
        manager.set_observer(Box::new(observer));
        let manager = Arc::new(Mutex::new(manager));
        let manual = (script.clock == ClockMode::Logical).then(|| Arc::new(ManualClock::new(0)));
        let clock: Arc<dyn Clock> = match &manual {
            Some(m) => m.clone(),
            None => Arc::new(WallClock::new(Duration::from_millis(script.tick_millis))),
        };
        let server = match transport {
            Transport::Tcp => Some(serve("127.0.0.1:0", manager.clone(), clock.clone())?),
            Transport::InProcess => None,
        };
        Ok(Self {
            manager,
            clock,
            manual,
            log,
            server,
        })
    }

    fn link(&self) -> Result<Link, HarnessError> {
        Ok(match &self.server {
            Some(s) => Link::Tcp(Client::connect(s.local_addr())?),
            None => Link::Local(self.manager.clone(), self.clock.clone()),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, PromiseManager> {
        self.manager.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn finish(
        mut self,
        script: &ScenarioScript,
        clients: Vec<ClientReport>,
        expectation_failures: Vec<String>,
        hasher: Sha256,
    ) -> RunReport {
        if let Some(s) = self.server.take() {
            s.shutdown();
        }
        let mut m = self.lock();
        m.take_observer();
        let final_state_digest = m.state_digest();
        let counters = m.counters().clone();
        drop(m);
        let mut invariants = self.log.lock().unwrap_or_else(|e| e.into_inner()).clone();
        // the counter against what clients actually saw, over the whole run
        let seen: u64 = clients
            .iter()
            .filter_map(|c| c.actions.get("rejected-by-promise-violation"))
            .sum();
        if let Some(t) = invariants.get_mut(VIOLATION_COUNTER) {
            t.record(seen == counters.violations_rolled_back, || {
                format!(
                    "run: counter {} but clients saw {seen} violation rejections",
                    counters.violations_rolled_back
                )
            });
        }
        let mut hasher = hasher;
        hasher.update(final_state_digest.as_bytes());
        let envelopes = clients.iter().map(|c| c.steps as u64).sum();
        RunReport {
            name: script.name.clone(),
            seed: script.seed,
            clock: script.clock,
            steps_run: script.step_count(),
            envelopes,
            faults: counters.faults,
            clients,
            counters,
            invariants,
            expectation_failures,
            final_state_digest,
            digest: hex::encode(hasher.finalize()),
        }
    }
}

/// Runs a script. Relative catalog paths are resolved against `base_dir`.
pub fn run_script(
    script: &ScenarioScript,
    base_dir: &Path,
    transport: Transport,
) -> Result<RunReport, HarnessError> {
    match script.clock {
        ClockMode::Logical => run_logical(script, base_dir, transport),
        ClockMode::Wall => run_wall(script, base_dir, transport),
    }
}

/// Rejects scripts naming actions the manager lacks or catalog entries that
/// do not exist.
fn check_references(script: &ScenarioScript, m: &PromiseManager) -> Result<(), HarnessError> {
    let view = m.catalog().snapshot_availability();
    let schema = m.catalog().schema();
    let known_type = |ty: &crate::predicate::ResourceTypeId| schema.get(ty).is_some();
    for c in &script.clients {
        for (i, step) in c.steps.iter().enumerate() {
            let at = || format!("{}: client `{}` step {}", script.name, c.name, i + 1);
            for p in step.requests.iter().flat_map(|r| &r.predicates) {
                if !known_type(p.resource_type()) {
                    return Err(HarnessError::Scenario(format!(
                        "{}: unknown resource type `{}`",
                        at(),
                        p.resource_type()
                    )));
                }
                if let Predicate::Named { instance } = p {
                    if view.instance(instance).is_none() {
                        return Err(HarnessError::Scenario(format!("{}: no instance {instance}", at())));
                    }
                }
            }
            if let Some(a) = &step.action {
                if a.name != TABLE_DUMP_ACTION && !m.handler_names().any(|n| n == a.name) {
                    return Err(HarnessError::Scenario(format!("{}: unknown action `{}`", at(), a.name)));
                }
            }
            for check in &step.checks {
                let ty = match check {
                    Check::QuantityOnHand { resource_type, .. } => resource_type,
                    Check::InstanceStatus { resource_type, key, .. } => {
                        let id = InstanceId::new(resource_type.clone(), key.clone());
                        if view.instance(&id).is_none() {
                            return Err(HarnessError::Scenario(format!("{}: no instance {id}", at())));
                        }
                        resource_type
                    }
                    _ => continue,
                };
                if !known_type(ty) {
                    return Err(HarnessError::Scenario(format!("{}: unknown resource type `{ty}`", at())));
                }
            }
        }
    }
    Ok(())
}

type Job = (Envelope, mpsc::Sender<Result<Envelope, HarnessError>>);

fn run_logical(
    script: &ScenarioScript,
    base_dir: &Path,
    transport: Transport,
) -> Result<RunReport, HarnessError> {
    let rig = Rig::new(script, base_dir, transport)?;
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut states: Vec<ClientState> = script
        .clients
        .iter()
        .map(|c| ClientState {
            time: c.start,
            report: ClientReport {
                name: c.name.clone(),
                ..Default::default()
            },
            ..Default::default()
        })
        .collect();

    // one worker thread per client; the coordinator hands each its envelope
    // in turn, so only one request is ever in flight
    let mut workers = Vec::new();
    let mut inboxes = Vec::new();
    for _ in &script.clients {
        let mut link = rig.link()?;
        let (tx, rx) = mpsc::channel::<Job>();
        inboxes.push(tx);
        workers.push(thread::spawn(move || {
            for (env, reply) in rx {
                let _ = reply.send(link.call(&env));
            }
        }));
    }

    let mut failures = Vec::new();
    let mut hasher = Sha256::new();
    let outcome = (|| -> Result<(), HarnessError> {
        loop {
            let pending: Vec<(usize, u64)> = script
                .clients
                .iter()
                .zip(&states)
                .enumerate()
                .filter(|(_, (c, s))| s.next < c.steps.len())
                .map(|(i, (c, s))| (i, s.time + c.steps[s.next].think))
                .collect();
            let Some(earliest) = pending.iter().map(|&(_, t)| t).min() else { break };
            let ready: Vec<usize> = pending
                .iter()
                .filter(|&&(_, t)| t == earliest)
                .map(|&(i, _)| i)
                .collect();
            let ci = ready[rng.gen_range(0..ready.len())];
            let client = &script.clients[ci];
            let state = &mut states[ci];
            let index = state.next;
            let step = &client.steps[index];
            state.next += 1;
            state.time = earliest;
            if let Some(clock) = &rig.manual {
                clock.advance_to(earliest);
            }
            let at = format!("{} step {} (t={earliest})", client.name, index + 1);

            hasher.update(format!("{ci}/{index}/{earliest}/").as_bytes());
            if step.sends_envelope() {
                if let Some(stage) = step.fault {
                    rig.lock().inject_fault(stage);
                }
                let env = state.envelope(&client.name, index, step);
                let (tx, rx) = mpsc::channel();
                inboxes[ci]
                    .send((env, tx))
                    .map_err(|_| HarnessError::Worker(client.name.clone()))?;
                let reply = rx
                    .recv()
                    .map_err(|_| HarnessError::Worker(client.name.clone()))??;
                hasher.update(encode(&reply).unwrap_or_default());
                state.absorb(&at, step, &reply, &mut failures);
            }
            if !step.checks.is_empty() {
                let m = rig.lock();
                for check in &step.checks {
                    if let Err(e) = state.check(&m, check) {
                        failures.push(format!("{at}: {e}"));
                    }
                }
            }
        }
        Ok(())
    })();
    drop(inboxes);
    for w in workers {
        let _ = w.join();
    }
    outcome?;
    let clients = states.into_iter().map(|s| s.report).collect();
    Ok(rig.finish(script, clients, failures, hasher))
}

/// Clients run concurrently against the wall clock, sleeping through their
/// think time. Checks and expectations are skipped since their outcome
/// depends on interleaving.
fn run_wall(
    script: &ScenarioScript,
    base_dir: &Path,
    transport: Transport,
) -> Result<RunReport, HarnessError> {
    let rig = Rig::new(script, base_dir, transport)?;
    let results: Vec<Result<ClientReport, HarnessError>> = thread::scope(|scope| {
        let handles: Vec<_> = script
            .clients
            .iter()
            .map(|client| {
                let rig = &rig;
                scope.spawn(move || -> Result<ClientReport, HarnessError> {
                    let mut link = rig.link()?;
                    let mut state = ClientState {
                        time: client.start,
                        report: ClientReport {
                            name: client.name.clone(),
                            ..Default::default()
                        },
                        ..Default::default()
                    };
                    let mut ignored = Vec::new();
                    for (index, step) in client.steps.iter().enumerate() {
                        if step.think > 0 {
                            thread::sleep(Duration::from_millis(step.think * script.tick_millis));
                        }
                        if !step.sends_envelope() {
                            continue;
                        }
                        if let Some(stage) = step.fault {
                            rig.lock().inject_fault(stage);
                        }
                        let env = state.envelope(&client.name, index, step);
                        let reply = link.call(&env)?;
                        state.absorb("", step, &reply, &mut ignored);
                    }
                    Ok(state.report)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Worker("panicked".into()))))
            .collect()
    });
    let clients = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(rig.finish(script, clients, Vec::new(), Sha256::new()))
}
