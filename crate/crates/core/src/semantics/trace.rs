//! Traces, the engine that produces them and the replay verifier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{MaybePolicy, Policy};
use crate::state::{
    CollectedKey, DataType, DeviceId, MaybeValue, Stored, SubjectDeviceId, SystemState, Timestamp,
};

use super::{apply, purge_expired, MalformedOperation, Operation, Outcome};

/// Direct state edits that bypass [`apply`]. They model a controller that
/// ignores the protocol and exist so the verifier can be shown to catch it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Tamper {
    /// Overwrites `Store_c(device, subject, data_type)`.
    TamperStoreC {
        device: DeviceId,
        subject: SubjectDeviceId,
        data_type: DataType,
        policy: MaybePolicy,
        value: MaybeValue,
    },
    /// Erases `Knows_s(subject, device)`.
    TamperForgetKnows {
        subject: SubjectDeviceId,
        device: DeviceId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Sweep {
    PurgeExpired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Apply(Operation),
    PurgeExpired,
    Tamper(Tamper),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepRepr {
    Apply(Operation),
    Sweep(Sweep),
    Tamper(Tamper),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub timestamp: Timestamp,
    pub step: Step,
    pub outcome: Outcome,
}

#[derive(Serialize)]
struct LineOut<'a> {
    timestamp: Timestamp,
    #[serde(flatten)]
    step: StepRef<'a>,
    outcome: Outcome,
}

#[derive(Serialize)]
#[serde(untagged)]
enum StepRef<'a> {
    Apply(&'a Operation),
    Sweep(Sweep),
    Tamper(&'a Tamper),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("trace is empty")]
    Empty,
}

impl TraceEntry {
    pub fn to_json_line(&self) -> String {
        let step = match &self.step {
            Step::Apply(op) => StepRef::Apply(op),
            Step::PurgeExpired => StepRef::Sweep(Sweep::PurgeExpired),
            Step::Tamper(t) => StepRef::Tamper(t),
        };
        serde_json::to_string(&LineOut {
            timestamp: self.timestamp,
            step,
            outcome: self.outcome,
        })
        .expect("trace entries serialize")
    }

    pub fn from_json_line(text: &str, line: usize) -> Result<TraceEntry, TraceError> {
        let json = |source| TraceError::Json { line, source };
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(json)?;
        let obj = value.as_object_mut().ok_or_else(|| TraceError::Json {
            line,
            source: serde::de::Error::custom("expected a JSON object"),
        })?;
        let timestamp = obj
            .remove("timestamp")
            .ok_or(TraceError::MissingField { line, field: "timestamp" })?;
        let outcome = obj
            .remove("outcome")
            .ok_or(TraceError::MissingField { line, field: "outcome" })?;
        let step = match serde_json::from_value::<StepRepr>(value).map_err(json)? {
            StepRepr::Apply(op) => Step::Apply(op),
            StepRepr::Sweep(Sweep::PurgeExpired) => Step::PurgeExpired,
            StepRepr::Tamper(t) => Step::Tamper(t),
        };
        Ok(TraceEntry {
            timestamp: serde_json::from_value(timestamp).map_err(json)?,
            step,
            outcome: serde_json::from_value(outcome).map_err(json)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, timestamp: Timestamp, step: Step, outcome: Outcome) {
        self.entries.push(TraceEntry {
            timestamp,
            step,
            outcome,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applied semantic operations in order, without timestamps.
    pub fn applied_operations(&self) -> Vec<&Operation> {
        self.entries
            .iter()
            .filter(|e| e.outcome.is_applied())
            .filter_map(|e| match &e.step {
                Step::Apply(op) => Some(op),
                _ => None,
            })
            .collect()
    }

    /// One JSON object per line, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&entry.to_json_line());
            out.push('\n');
        }
        out
    }

    /// Parses a JSON-lines trace. Blank lines are skipped; a file without any
    /// entry is rejected.
    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| TraceEntry::from_json_line(l, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        if entries.is_empty() {
            return Err(TraceError::Empty);
        }
        Ok(Trace { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Malformed(#[from] MalformedOperation),
    #[error("timestamp {got} precedes the last recorded {last}")]
    NonMonotonic { last: Timestamp, got: Timestamp },
    #[error("tamper step names device {0} which is not installed")]
    UndeclaredDevice(DeviceId),
}

/// Sending half of the engine's operation queue.
#[derive(Clone)]
pub struct OpQueue(mpsc::Sender<(Timestamp, Operation)>);

impl OpQueue {
    /// Returns false once the engine has been dropped.
    pub fn enqueue(&self, at: Timestamp, op: Operation) -> bool {
        self.0.send((at, op)).is_ok()
    }
}

/// Single writer over the system state. Every mutation goes through here and
/// is appended to the trace.
pub struct Engine {
    state: SystemState,
    trace: Trace,
    last: Timestamp,
    tx: mpsc::Sender<(Timestamp, Operation)>,
    rx: mpsc::Receiver<(Timestamp, Operation)>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl Engine {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel();
        Engine {
            state: SystemState::new(),
            trace: Trace::new(),
            last: 0,
            tx,
            rx,
        }
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn queue(&self) -> OpQueue {
        OpQueue(self.tx.clone())
    }

    fn advance(&mut self, at: Timestamp) -> Result<(), EngineError> {
        if at < self.last {
            return Err(EngineError::NonMonotonic { last: self.last, got: at });
        }
        self.last = at;
        Ok(())
    }

    pub fn submit(&mut self, at: Timestamp, op: Operation) -> Result<Outcome, EngineError> {
        if at < self.last {
            return Err(EngineError::NonMonotonic { last: self.last, got: at });
        }
        let (next, outcome) = step_apply(&self.state, &op, at)?;
        self.advance(at)?;
        self.state = next;
        self.trace.push(at, Step::Apply(op), outcome);
        Ok(outcome)
    }

    /// Runs a retention sweep and records it. Returns the purged keys.
    pub fn sweep(&mut self, at: Timestamp) -> Result<Vec<CollectedKey>, EngineError> {
        self.advance(at)?;
        let (next, purged) = purge_expired(&self.state, at);
        self.state = next;
        self.trace.push(at, Step::PurgeExpired, Outcome::Applied);
        Ok(purged)
    }

    pub fn tamper(&mut self, at: Timestamp, edit: Tamper) -> Result<(), EngineError> {
        let next = step_tamper(&self.state, &edit, at)?;
        self.advance(at)?;
        self.state = next;
        self.trace.push(at, Step::Tamper(edit), Outcome::Applied);
        Ok(())
    }

    /// Applies everything currently queued, in arrival order. Timestamps that
    /// would go backwards are raised to the last recorded time.
    pub fn drain(&mut self) -> Result<Vec<Outcome>, EngineError> {
        let mut outcomes = Vec::new();
        while let Ok((at, op)) = self.rx.try_recv() {
            outcomes.push(self.submit(at.max(self.last), op)?);
        }
        Ok(outcomes)
    }
}

/// `apply` plus maintenance of the collection timestamps.
fn step_apply(
    st: &SystemState,
    op: &Operation,
    at: Timestamp,
) -> Result<(SystemState, Outcome), MalformedOperation> {
    let (mut next, outcome) = apply(st, op)?;
    if let (Outcome::Applied, Operation::Collect { device, subject, data_type, .. }) = (outcome, op)
    {
        let key = CollectedKey {
            device: *device,
            subject: subject.clone(),
            data_type: *data_type,
        };
        if next.store_c.contains_key(&key) {
            next.collected_at.insert(key, at);
        } else {
            next.collected_at.remove(&key);
        }
    }
    Ok((next, outcome))
}

fn step_tamper(st: &SystemState, edit: &Tamper, at: Timestamp) -> Result<SystemState, EngineError> {
    let mut next = st.clone();
    match edit {
        Tamper::TamperStoreC {
            device,
            subject,
            data_type,
            policy,
            value,
        } => {
            if !st.config.contains_key(device) {
                return Err(EngineError::UndeclaredDevice(*device));
            }
            let key = CollectedKey {
                device: *device,
                subject: subject.clone(),
                data_type: *data_type,
            };
            let entry = Stored::new(policy.clone(), value.clone());
            if entry.is_undefined() {
                next.collected_at.remove(&key);
            } else {
                next.collected_at.insert(key.clone(), at);
            }
            next.set_store_c(key, entry);
        }
        Tamper::TamperForgetKnows { subject, device } => {
            next.knows.remove(&(subject.clone(), *device));
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Property {
    /// Collection only from informed subject devices.
    P1,
    /// Collected data carries the subject's last communicated policy.
    P2,
    /// After a require, the stored policy is the last one received.
    P3,
    /// Stored data is covered by the controller policy.
    P4,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyViolation {
    pub index: usize,
    pub timestamp: Timestamp,
    pub property: Property,
    pub detail: String,
}

impl fmt::Display for PropertyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} violated at entry {} (t={} ms): {}",
            self.property, self.index, self.timestamp, self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("entry {index}: timestamp {got} precedes {last}")]
    NonMonotonic {
        index: usize,
        last: Timestamp,
        got: Timestamp,
    },
    #[error("entry {index}: {source}")]
    Engine {
        index: usize,
        #[source]
        source: EngineError,
    },
    #[error("entry {index}: recorded outcome {recorded:?} but replay gives {replayed:?}")]
    OutcomeMismatch {
        index: usize,
        recorded: Outcome,
        replayed: Outcome,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Also require, at each collect, that the gateway hosting the source
    /// device's policies was informed. Off by default.
    pub gateway_informed: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Writer {
    Collect,
    Require,
    Tamper,
}

pub fn verify_trace(trace: &Trace) -> Result<Vec<PropertyViolation>, ReplayError> {
    verify_trace_with(trace, VerifyOptions::default())
}

/// Replays `trace` from the empty state through the engine transition and
/// checks the four derived properties at every step.
pub fn verify_trace_with(
    trace: &Trace,
    options: VerifyOptions,
) -> Result<Vec<PropertyViolation>, ReplayError> {
    let mut state = SystemState::new();
    let mut last_time = 0;
    // last policy the controller received for each (δ, σ, θ)
    let mut communicated: BTreeMap<CollectedKey, Policy> = BTreeMap::new();
    let mut writer: BTreeMap<CollectedKey, Writer> = BTreeMap::new();
    let mut reported_uncovered: BTreeSet<(CollectedKey, Stored)> = BTreeSet::new();
    let mut violations = Vec::new();

    for (index, entry) in trace.entries.iter().enumerate() {
        let at = entry.timestamp;
        if at < last_time {
            return Err(ReplayError::NonMonotonic { index, last: last_time, got: at });
        }
        last_time = at;
        let mut violate = |property, detail: String| {
            violations.push(PropertyViolation {
                index,
                timestamp: at,
                property,
                detail,
            })
        };

        let next = match &entry.step {
            Step::Apply(op) => {
                let (next, replayed) = step_apply(&state, op, at).map_err(|e| ReplayError::Engine {
                    index,
                    source: e.into(),
                })?;
                if replayed != entry.outcome {
                    return Err(ReplayError::OutcomeMismatch {
                        index,
                        recorded: entry.outcome,
                        replayed,
                    });
                }
                if replayed.is_applied() {
                    match op {
                        Operation::Collect { device, subject, data_type, policy, .. } => {
                            let declared = state.declared.get(device);
                            let mut informed = vec![subject.clone()];
                            if options.gateway_informed {
                                let host = state.paired(subject);
                                if host != *subject {
                                    informed.push(host);
                                }
                            }
                            for who in informed {
                                if declared.is_none() || state.knows(&who, device) != declared {
                                    violate(
                                        Property::P1,
                                        format!("{device} collected from {subject} but {who} was not informed of its declaration"),
                                    );
                                }
                            }
                            let key = CollectedKey {
                                device: *device,
                                subject: subject.clone(),
                                data_type: *data_type,
                            };
                            if let Some(p) = policy {
                                communicated.insert(key.clone(), p.clone());
                            }
                            let stored = next.store_c(&key);
                            if stored.value.is_some() && stored.policy.as_ref() != communicated.get(&key) {
                                violate(
                                    Property::P2,
                                    format!("{device} stores data from {subject} under a policy the subject did not communicate"),
                                );
                            }
                            track_writer(&mut writer, key, &stored, Writer::Collect);
                        }
                        Operation::Require { source, device, data_type, policy, .. } => {
                            let key = CollectedKey {
                                device: *device,
                                subject: source.clone(),
                                data_type: *data_type,
                            };
                            if let Some(p) = policy {
                                communicated.insert(key.clone(), p.clone());
                            }
                            let stored = next.store_c(&key);
                            if stored.policy.as_ref() != communicated.get(&key) {
                                violate(
                                    Property::P3,
                                    format!("{device} keeps data from {source} under a policy other than the last one required"),
                                );
                            }
                            track_writer(&mut writer, key, &stored, Writer::Require);
                        }
                        _ => {}
                    }
                }
                next
            }
            Step::PurgeExpired => {
                let (next, purged) = purge_expired(&state, at);
                for key in purged {
                    writer.remove(&key);
                }
                next
            }
            Step::Tamper(edit) => {
                let next = step_tamper(&state, edit, at)
                    .map_err(|source| ReplayError::Engine { index, source })?;
                if let Tamper::TamperStoreC { device, subject, data_type, .. } = edit {
                    let key = CollectedKey {
                        device: *device,
                        subject: subject.clone(),
                        data_type: *data_type,
                    };
                    let stored = next.store_c(&key);
                    track_writer(&mut writer, key, &stored, Writer::Tamper);
                }
                next
            }
        };

        // P4 over the whole controller store. Entries last written by a
        // require reflect the subject's own request and are covered by P3.
        for (key, stored) in &next.store_c {
            if stored.value.is_none() || writer.get(key) == Some(&Writer::Require) {
                continue;
            }
            let covered = match (next.config.get(&key.device), &stored.policy) {
                (Some(config), Some(p)) => config.policy.implies(p),
                _ => false,
            };
            if !covered && reported_uncovered.insert((key.clone(), stored.clone())) {
                violate(
                    Property::P4,
                    format!(
                        "{} stores data from {} not covered by its policy",
                        key.device, key.subject
                    ),
                );
            }
        }
        state = next;
    }
    Ok(violations)
}

fn track_writer(
    writer: &mut BTreeMap<CollectedKey, Writer>,
    key: CollectedKey,
    stored: &Stored,
    who: Writer,
) {
    if stored.is_undefined() {
        writer.remove(&key);
    } else {
        writer.insert(key, who);
    }
}
