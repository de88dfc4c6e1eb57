//! Deterministic discrete-event runs of the case studies over either
//! transport. A run produces a semantics trace plus transport-side records.

mod sim;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pdc::{Answer, ConsentRule};
use crate::policy::Policy;
use crate::state::{DataType, Declaration, DeviceId, DeviceProfile, Position, Range, Timestamp};

pub use sim::{run, GateChange, LearnedDeclaration, PromptRecord, ScenarioReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Transport {
    Beacon,
    Registry,
}

impl std::str::FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "beacon" => Ok(Transport::Beacon),
            "registry" => Ok(Transport::Registry),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Anpr,
    Mall,
    MeetingRoom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub position: Position,
    pub range: Range,
    pub data_type: DataType,
    pub policy: Policy,
    #[serde(default)]
    pub install_at: Timestamp,
    /// Times at which the device collects from every subject in range.
    #[serde(default)]
    pub captures: Vec<Timestamp>,
}

impl DeviceSpec {
    /// The declaration this device emits; its id is derived from the name.
    pub fn declaration(&self) -> Declaration {
        Declaration {
            device_id: DeviceId::from_label(&self.name).expect("device names are validated"),
            profile: DeviceProfile {
                position: self.position,
                range: self.range,
                data_type: self.data_type,
                policy: self.policy.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub name: String,
    /// MAC of the gateway phone. A subject without one has no custodian.
    #[serde(default)]
    pub mac: Option<String>,
    #[serde(default)]
    pub plate: Option<String>,
    #[serde(default)]
    pub rules: Vec<ConsentRule>,
    /// Letter answered to every prompt (`a`, `A`, `r`, `R`); unset leaves
    /// prompts unanswered.
    #[serde(default)]
    pub on_prompt: Option<String>,
    /// Data types for which no identifier is configured in the custodian.
    #[serde(default)]
    pub unconfigured: BTreeSet<DataType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TimelineEvent {
    Move { subject: String, to: Position },
    Enter { subject: String },
    Leave { subject: String },
    Capture { device: String, subject: String },
    Withdraw { subject: String, device: String },
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at: Timestamp,
    #[serde(flatten)]
    pub event: TimelineEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub device: String,
}

fn default_interval() -> u64 {
    crate::beacon::DEFAULT_INTERVAL_MS
}

fn default_poll() -> u64 {
    crate::registry::DEFAULT_POLL_PERIOD_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    pub transport: Transport,
    pub duration_ms: Timestamp,
    #[serde(default = "default_interval")]
    pub advertising_interval_ms: u64,
    #[serde(default)]
    pub advertising_margin: Range,
    #[serde(default = "default_poll")]
    pub poll_period_ms: u64,
    #[serde(default)]
    pub lookahead_m: f64,
    #[serde(default)]
    pub drop_probability: f64,
    pub devices: Vec<DeviceSpec>,
    pub subjects: Vec<SubjectSpec>,
    #[serde(default)]
    pub timeline: Vec<TimedEvent>,
    #[serde(default)]
    pub room: Option<RoomSpec>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("script: {0}")]
    Invalid(String),
    #[error("engine: {0}")]
    Engine(#[from] crate::semantics::EngineError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

pub(crate) fn parse_mac(text: &str) -> Option<[u8; 6]> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 6 {
        return None;
    }
    let mut out = [0u8; 6];
    for (o, p) in out.iter_mut().zip(parts) {
        if p.len() != 2 {
            return None;
        }
        *o = u8::from_str_radix(p, 16).ok()?;
    }
    Some(out)
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript = serde_json::from_str(text)?;
        script.validate()?;
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn device_index(&self, name: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.name == name)
    }

    pub fn subject_index(&self, name: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut names = BTreeSet::new();
        for d in &self.devices {
            if !names.insert(&d.name) {
                return Err(invalid(format!("duplicate device {}", d.name)));
            }
            crate::state::DeviceId::from_label(&d.name)
                .map_err(|e| invalid(format!("device {}: {e}", d.name)))?;
            if d.policy.purposes.is_empty() {
                return Err(invalid(format!("device {}: policy needs a purpose", d.name)));
            }
            if d.install_at > self.duration_ms || d.captures.iter().any(|&t| t > self.duration_ms) {
                return Err(invalid(format!("device {}: time beyond duration", d.name)));
            }
            if d.captures.iter().any(|&t| t < d.install_at) {
                return Err(invalid(format!("device {}: capture before install", d.name)));
            }
            let expected = match self.kind {
                ScenarioKind::Anpr => Some(DataType::PlateNumber),
                ScenarioKind::Mall => Some(DataType::MacAddress),
                ScenarioKind::MeetingRoom => None,
            };
            if expected.is_some_and(|t| t != d.data_type) {
                return Err(invalid(format!("device {}: wrong data type for {:?}", d.name, self.kind)));
            }
        }
        let mut names = BTreeSet::new();
        for s in &self.subjects {
            if !names.insert(&s.name) {
                return Err(invalid(format!("duplicate subject {}", s.name)));
            }
            if s.mac.is_none() && s.plate.is_none() {
                return Err(invalid(format!("subject {} has neither mac nor plate", s.name)));
            }
            if let Some(mac) = &s.mac {
                parse_mac(mac).ok_or_else(|| invalid(format!("subject {}: bad mac {mac}", s.name)))?;
            }
            if let Some(plate) = &s.plate {
                if plate.is_empty() || plate.len() > crate::state::MAX_SUBJECT_VALUE {
                    return Err(invalid(format!("subject {}: bad plate", s.name)));
                }
            }
            if let Some(a) = &s.on_prompt {
                Answer::from_letter(a)
                    .ok_or_else(|| invalid(format!("subject {}: bad prompt answer {a:?}", s.name)))?;
            }
            let text = serde_json::to_string(&s.rules)?;
            crate::pdc::parse_rules(&text).map_err(|e| invalid(format!("subject {}: {e}", s.name)))?;
        }
        let room = match (&self.room, self.kind) {
            (Some(room), ScenarioKind::MeetingRoom) => Some(
                self.device_index(&room.device)
                    .ok_or_else(|| invalid(format!("unknown room device {}", room.device)))?,
            ),
            (None, ScenarioKind::MeetingRoom) => return Err(invalid("meeting_room needs a room")),
            (Some(_), _) => return Err(invalid("room only allowed in meeting_room scripts")),
            (None, _) => None,
        };
        let mut present = BTreeSet::new();
        let mut last = 0;
        for e in &self.timeline {
            if e.at < last {
                return Err(invalid("timeline must be sorted by time"));
            }
            last = e.at;
            if e.at > self.duration_ms {
                return Err(invalid("timeline event beyond duration"));
            }
            let subject = |name: &String| {
                self.subject_index(name)
                    .ok_or_else(|| invalid(format!("unknown subject {name}")))
            };
            let device = |name: &String| {
                self.device_index(name)
                    .ok_or_else(|| invalid(format!("unknown device {name}")))
            };
            match &e.event {
                TimelineEvent::Move { subject: s, .. } => {
                    subject(s)?;
                }
                TimelineEvent::Enter { subject: s } | TimelineEvent::Leave { subject: s } => {
                    let i = subject(s)?;
                    if room.is_none() {
                        return Err(invalid("enter/leave need a room"));
                    }
                    let entering = matches!(e.event, TimelineEvent::Enter { .. });
                    if entering != present.insert(i) {
                        if entering {
                            return Err(invalid(format!("{s} enters twice")));
                        }
                        return Err(invalid(format!("{s} leaves without entering")));
                    }
                    if !entering {
                        present.remove(&i);
                    }
                }
                TimelineEvent::Capture { device: d, subject: s } => {
                    device(d)?;
                    subject(s)?;
                }
                TimelineEvent::Withdraw { subject: s, device: d } => {
                    device(d)?;
                    if self.subjects[subject(s)?].mac.is_none() {
                        return Err(invalid(format!("{s} has no custodian to withdraw with")));
                    }
                }
                TimelineEvent::Sweep => {}
            }
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(invalid("drop_probability must be in [0, 1]"));
        }
        if !self.lookahead_m.is_finite() || self.lookahead_m < 0.0 {
            return Err(invalid("lookahead_m must be non-negative"));
        }
        Ok(())
    }
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("anpr_basic", include_str!("../../scenarios/anpr_basic.json")),
    ("anpr_refuse", include_str!("../../scenarios/anpr_refuse.json")),
    ("mall_walk", include_str!("../../scenarios/mall_walk.json")),
    ("meeting_room", include_str!("../../scenarios/meeting_room.json")),
];

pub fn bundled(name: &str) -> Option<ScenarioScript> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScenarioScript::from_json(text).expect("bundled script is valid"))
}
