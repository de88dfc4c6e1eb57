use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

use super::{parse_mac, ScenarioError, ScenarioScript, TimelineEvent, Transport};
use crate::beacon::{BeaconEndpoint, RadioBus, Scanner, ScannerId};
use crate::pdc::{Answer, BeaconChannel, Decision, Pdc, RegistryChannel};
use crate::policy::Policy;
use crate::registry::{
    LocalClient, Registry, RegistryApi, RegistryPoller, Role, TokenEntry, TokenTable,
};
use crate::semantics::{Engine, Operation, Trace};
use crate::state::{
    within, DataType, DataValue, Declaration, DeviceId, Position, SubjectDeviceId,
    Timestamp,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GateChange {
    pub at: Timestamp,
    pub occupancy: usize,
    pub tally: usize,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LearnedDeclaration {
    pub at: Timestamp,
    pub subject: String,
    pub device: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptRecord {
    pub at: Timestamp,
    pub subject: String,
    pub device: String,
    pub answer: Option<Answer>,
}

/// Consent evidence held by a controller for one subject device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Evidence {
    pub subject: SubjectDeviceId,
    pub policy: Policy,
    pub timestamp: Timestamp,
}

#[derive(Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub transport: Transport,
    #[serde(skip)]
    pub trace: Trace,
    /// Controller-side consent log per device name.
    pub receipts: BTreeMap<String, Vec<Evidence>>,
    pub learned: Vec<LearnedDeclaration>,
    pub prompts: Vec<PromptRecord>,
    pub gate: Vec<GateChange>,
    /// Emission and withdrawal failures, in order.
    pub notes: Vec<String>,
}

impl ScenarioReport {
    /// Half-open intervals `[start, end)` during which the room gate was
    /// enabled; `None` end means still enabled at the end of the run.
    pub fn gate_intervals(&self) -> Vec<(Timestamp, Option<Timestamp>)> {
        let mut out = Vec::new();
        let mut open: Option<Timestamp> = None;
        for c in &self.gate {
            match (open, c.enabled) {
                (None, true) => open = Some(c.at),
                (Some(start), false) => {
                    out.push((start, Some(c.at)));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            out.push((start, None));
        }
        out
    }

    pub fn receipts_for(&self, device: &str) -> &[Evidence] {
        self.receipts.get(device).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Install(usize),
    Timeline(usize),
    BeaconTick(usize),
    Poll(usize),
    Capture(usize),
}

impl Event {
    /// Tie-break for events at the same millisecond.
    fn class(self) -> u8 {
        match self {
            Event::Install(_) => 0,
            Event::Timeline(_) => 1,
            Event::BeaconTick(_) | Event::Poll(_) => 2,
            Event::Capture(_) => 3,
        }
    }
}

struct SubjectRt {
    gateway: Option<SubjectDeviceId>,
    plate: Option<SubjectDeviceId>,
    position: Option<Position>,
    pdc: Option<Pdc>,
    answer: Option<Answer>,
    scanner: Scanner,
    scanner_id: Option<ScannerId>,
    poller: RegistryPoller,
    client: LocalClient,
}

impl SubjectRt {
    /// The subject device that a collector of `data_type` observes.
    fn source(&self, data_type: DataType) -> Option<&SubjectDeviceId> {
        match data_type {
            DataType::PlateNumber => self.plate.as_ref(),
            _ => self.gateway.as_ref(),
        }
    }
}

struct DeviceRt {
    id: DeviceId,
    declaration: Declaration,
    installed: bool,
    beacon: Option<BeaconEndpoint>,
    client: LocalClient,
}

fn physical_value(name: &str, source: &SubjectDeviceId, data_type: DataType) -> DataValue {
    match data_type {
        DataType::MacAddress | DataType::PlateNumber => DataValue(source.bytes().to_vec()),
        other => DataValue(format!("{}:{}", other.display_name(), name).into_bytes()),
    }
}

struct Sim<'a> {
    script: &'a ScenarioScript,
    transport: Transport,
    clock: Arc<AtomicU64>,
    engine: Engine,
    bus: RadioBus,
    devices: Vec<DeviceRt>,
    subjects: Vec<SubjectRt>,
    heap: BinaryHeap<Reverse<(Timestamp, u8, u64, Event)>>,
    seq: u64,
    room: Option<usize>,
    present: BTreeSet<usize>,
    gate_enabled: bool,
    report: ScenarioReport,
}

pub fn run(
    script: &ScenarioScript,
    seed: u64,
    transport: Transport,
) -> Result<ScenarioReport, ScenarioError> {
    script.validate()?;
    let mut sim = Sim::new(script, seed, transport);
    sim.run()?;
    let mut report = sim.report;
    report.trace = sim.engine.into_trace();
    Ok(report)
}

impl<'a> Sim<'a> {
    fn new(script: &'a ScenarioScript, seed: u64, transport: Transport) -> Self {
        let clock = Arc::new(AtomicU64::new(0));
        let mut tokens = Vec::new();
        for d in &script.devices {
            tokens.push(TokenEntry {
                token: format!("dc:{}", d.name),
                principal: d.name.clone(),
                role: Role::Dc,
            });
        }
        for s in &script.subjects {
            tokens.push(TokenEntry {
                token: format!("ds:{}", s.name),
                principal: s.name.clone(),
                role: Role::Ds,
            });
        }
        let reg_clock = clock.clone();
        let registry = Arc::new(Registry::with_clock(
            TokenTable::new(tokens),
            Arc::new(move || reg_clock.load(Ordering::SeqCst)),
        ));

        let devices = script
            .devices
            .iter()
            .map(|d| {
                let declaration = d.declaration();
                DeviceRt {
                    id: declaration.device_id,
                    declaration,
                    installed: false,
                    beacon: None,
                    client: LocalClient::new(registry.clone(), Some(&format!("dc:{}", d.name))),
                }
            })
            .collect();

        let mut bus = RadioBus::with_loss(script.drop_probability, seed);
        let subjects = script
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let gateway = s.mac.as_deref().and_then(parse_mac).map(SubjectDeviceId::mac);
                let plate = s.plate.as_deref().map(SubjectDeviceId::plate);
                let pdc = gateway.clone().map(|gw| {
                    let mut pdc = Pdc::new(gw.clone(), seed.wrapping_add(i as u64))
                        .with_rules(s.rules.clone());
                    for &t in DataType::ALL {
                        if s.unconfigured.contains(&t) {
                            continue;
                        }
                        let source = match t {
                            DataType::PlateNumber => match &plate {
                                Some(p) => p.clone(),
                                None => continue,
                            },
                            _ => gw.clone(),
                        };
                        let value = physical_value(&s.name, &source, t);
                        pdc.configure_identifier(t, source, value);
                    }
                    pdc
                });
                let scanner_id = (transport == Transport::Beacon && pdc.is_some())
                    .then(|| bus.add_scanner(None));
                SubjectRt {
                    gateway,
                    plate,
                    position: None,
                    pdc,
                    answer: s.on_prompt.as_deref().and_then(Answer::from_letter),
                    scanner: Scanner::new(),
                    scanner_id,
                    poller: RegistryPoller::new(0)
                        .with_period(script.poll_period_ms)
                        .with_lookahead(script.lookahead_m),
                    client: LocalClient::new(registry.clone(), Some(&format!("ds:{}", s.name))),
                }
            })
            .collect();

        Sim {
            script,
            transport,
            clock,
            engine: Engine::new(),
            bus,
            devices,
            subjects,
            heap: BinaryHeap::new(),
            seq: 0,
            room: script
                .room
                .as_ref()
                .and_then(|r| script.device_index(&r.device)),
            present: BTreeSet::new(),
            gate_enabled: true,
            report: ScenarioReport {
                name: script.name.clone(),
                seed,
                transport,
                trace: Trace::new(),
                receipts: BTreeMap::new(),
                learned: Vec::new(),
                prompts: Vec::new(),
                gate: Vec::new(),
                notes: Vec::new(),
            },
        }
    }

    fn schedule(&mut self, at: Timestamp, event: Event) {
        if at <= self.script.duration_ms {
            self.seq += 1;
            self.heap.push(Reverse((at, event.class(), self.seq, event)));
        }
    }

    fn run(&mut self) -> Result<(), ScenarioError> {
        for (i, d) in self.script.devices.iter().enumerate() {
            self.schedule(d.install_at, Event::Install(i));
            for &t in &d.captures {
                self.schedule(t, Event::Capture(i));
            }
        }
        for (i, e) in self.script.timeline.iter().enumerate() {
            self.schedule(e.at, Event::Timeline(i));
        }
        if self.transport == Transport::Registry {
            for i in 0..self.subjects.len() {
                if self.subjects[i].pdc.is_some() {
                    self.schedule(0, Event::Poll(i));
                }
            }
        }
        if self.room.is_some() {
            self.evaluate_gate(0);
        }
        while let Some(Reverse((at, _, _, event))) = self.heap.pop() {
            self.clock.store(at, Ordering::SeqCst);
            match event {
                Event::Install(d) => self.install(d, at)?,
                Event::Timeline(i) => self.timeline(i, at)?,
                Event::BeaconTick(d) => self.beacon_tick(d, at)?,
                Event::Poll(s) => self.poll(s, at)?,
                Event::Capture(d) => self.capture_all(d, at)?,
            }
        }
        self.collect_receipts();
        Ok(())
    }

    fn install(&mut self, d: usize, at: Timestamp) -> Result<(), ScenarioError> {
        let dev = &mut self.devices[d];
        let decl = dev.declaration.clone();
        dev.installed = true;
        self.engine.submit(
            at,
            Operation::Declare {
                device: decl.device_id,
                profile: decl.profile.clone(),
            },
        )?;
        self.engine.submit(
            at,
            Operation::Install {
                device: decl.device_id,
                profile: decl.profile.clone(),
            },
        )?;
        match self.transport {
            Transport::Beacon => {
                let beacon = BeaconEndpoint::new(decl, at)
                    .map_err(|e| super::invalid(format!("device {}: {e}", self.script.devices[d].name)))?
                    .with_interval(self.script.advertising_interval_ms)
                    .with_margin(self.script.advertising_margin);
                self.devices[d].beacon = Some(beacon);
                self.schedule(at, Event::BeaconTick(d));
            }
            Transport::Registry => {
                let dev = &self.devices[d];
                if let Err(e) = dev.client.put_device(dev.id, decl.profile) {
                    self.report.notes.push(format!("t={at} register {}: {e}", dev.id));
                }
            }
        }
        Ok(())
    }

    fn timeline(&mut self, i: usize, at: Timestamp) -> Result<(), ScenarioError> {
        let script = self.script;
        match &script.timeline[i].event {
            TimelineEvent::Move { subject, to } => {
                let s = script.subject_index(subject).expect("validated");
                let rt = &mut self.subjects[s];
                rt.position = Some(*to);
                if let Some(id) = rt.scanner_id {
                    self.bus.set_position(id, Some(*to));
                }
                let movers: Vec<SubjectDeviceId> =
                    rt.gateway.iter().chain(rt.plate.iter()).cloned().collect();
                for m in movers {
                    self.engine.submit(at, Operation::Move { subject: m, position: *to })?;
                }
                if let (Some(gw), Some(plate)) = (&rt.gateway, &rt.plate) {
                    if self.engine.state().paired(plate) != *gw {
                        let op = Operation::Pair {
                            subject: plate.clone(),
                            host: gw.clone(),
                        };
                        self.engine.submit(at, op)?;
                    }
                }
            }
            TimelineEvent::Enter { subject } => {
                self.present.insert(script.subject_index(subject).expect("validated"));
                self.evaluate_gate(at);
            }
            TimelineEvent::Leave { subject } => {
                self.present.remove(&script.subject_index(subject).expect("validated"));
                self.evaluate_gate(at);
            }
            TimelineEvent::Capture { device, subject } => {
                let d = script.device_index(device).expect("validated");
                let s = script.subject_index(subject).expect("validated");
                self.capture(d, s, at)?;
            }
            TimelineEvent::Withdraw { subject, device } => {
                let d = script.device_index(device).expect("validated");
                let s = script.subject_index(subject).expect("validated");
                self.withdraw(s, d, at)?;
            }
            TimelineEvent::Sweep => {
                self.engine.sweep(at)?;
            }
        }
        Ok(())
    }

    fn beacon_tick(&mut self, d: usize, at: Timestamp) -> Result<(), ScenarioError> {
        let Some(beacon) = self.devices[d].beacon.as_mut() else {
            return Ok(());
        };
        let deliveries = beacon.tick(at, &mut self.bus);
        let next = beacon.next_due();
        let mut learned = Vec::new();
        for delivery in deliveries {
            let Some(s) = self
                .subjects
                .iter()
                .position(|rt| rt.scanner_id == Some(delivery.scanner))
            else {
                continue;
            };
            for (_, frame) in self.bus.take_inbox(delivery.scanner) {
                if let Some(decl) = self.subjects[s].scanner.receive(&frame) {
                    learned.push((s, decl));
                }
            }
        }
        for (s, decl) in learned {
            self.learn(s, decl, at)?;
        }
        self.schedule(next, Event::BeaconTick(d));
        Ok(())
    }

    fn poll(&mut self, s: usize, at: Timestamp) -> Result<(), ScenarioError> {
        let rt = &mut self.subjects[s];
        let report = rt.poller.poll(at, rt.position, &rt.client);
        let next = rt.poller.next_due();
        if let Some(e) = report.error {
            self.report
                .notes
                .push(format!("t={at} {} poll: {e}", self.script.subjects[s].name));
        }
        for decl in report.declarations {
            self.learn(s, decl, at)?;
        }
        self.schedule(next, Event::Poll(s));
        Ok(())
    }

    fn device_by_id(&self, id: &DeviceId) -> Option<usize> {
        self.devices.iter().position(|d| d.id == *id)
    }

    fn learn(&mut self, s: usize, decl: Declaration, at: Timestamp) -> Result<(), ScenarioError> {
        let Some(d) = self.device_by_id(&decl.device_id) else {
            return Ok(());
        };
        let subject_name = self.script.subjects[s].name.clone();
        let device_name = self.script.devices[d].name.clone();
        self.report.learned.push(LearnedDeclaration {
            at,
            subject: subject_name.clone(),
            device: device_name.clone(),
        });
        let rt = &mut self.subjects[s];
        let Some(pdc) = rt.pdc.as_mut() else {
            return Ok(());
        };
        let mut decision = pdc.evaluate(&decl, at);
        if decision == Decision::Prompt {
            self.report.prompts.push(PromptRecord {
                at,
                subject: subject_name.clone(),
                device: device_name.clone(),
                answer: rt.answer,
            });
            if let Some(answer) = rt.answer {
                decision = pdc.handle_prompt(&decl, answer).decision;
            }
        }
        let Decision::Consent(policy) = decision else {
            return Ok(());
        };
        let queue = self.engine.queue();
        let writer = rt.position.unwrap_or_default();
        let result = match self.transport {
            Transport::Beacon => {
                let Some(beacon) = self.devices[d].beacon.as_mut() else {
                    return Ok(());
                };
                let mut channel = BeaconChannel { beacon, writer };
                pdc.emit_consent(&policy, &decl, self.engine.state(), &mut channel, &queue, at)
            }
            Transport::Registry => {
                let mut channel = RegistryChannel { api: &rt.client };
                pdc.emit_consent(&policy, &decl, self.engine.state(), &mut channel, &queue, at)
            }
        };
        if let Err(e) = result {
            self.report
                .notes
                .push(format!("t={at} {subject_name} -> {device_name}: {e}"));
        }
        self.engine.drain()?;
        Ok(())
    }

    /// Latest consent the controller holds for `subject`.
    fn evidence(&self, d: usize, subject: &SubjectDeviceId) -> Option<Evidence> {
        let dev = &self.devices[d];
        match self.transport {
            Transport::Beacon => dev.beacon.as_ref().and_then(|b| {
                b.receipts().iter().rev().find(|r| r.subject == *subject).map(|r| Evidence {
                    subject: r.subject.clone(),
                    policy: r.policy.clone(),
                    timestamp: r.timestamp,
                })
            }),
            Transport::Registry => dev
                .client
                .get_consents(&dev.id, 0)
                .ok()?
                .into_iter()
                .rev()
                .find(|c| c.subject == *subject)
                .map(|c| Evidence {
                    subject: c.subject,
                    policy: c.policy,
                    timestamp: c.timestamp,
                }),
        }
    }

    fn capture(&mut self, d: usize, s: usize, at: Timestamp) -> Result<(), ScenarioError> {
        if !self.devices[d].installed {
            return Ok(());
        }
        let data_type = self.script.devices[d].data_type;
        let Some(source) = self.subjects[s].source(data_type).cloned() else {
            return Ok(());
        };
        let policy = self.evidence(d, &source).map(|e| e.policy);
        let value = physical_value(&self.script.subjects[s].name, &source, data_type);
        self.engine.submit(
            at,
            Operation::Collect {
                device: self.devices[d].id,
                subject: source,
                data_type,
                policy,
                value: Some(value),
            },
        )?;
        Ok(())
    }

    fn capture_all(&mut self, d: usize, at: Timestamp) -> Result<(), ScenarioError> {
        if !self.devices[d].installed {
            return Ok(());
        }
        let targets: Vec<usize> = if self.room == Some(d) {
            if !self.gate_enabled {
                return Ok(());
            }
            self.present.iter().copied().collect()
        } else {
            let profile = &self.devices[d].declaration.profile;
            (0..self.subjects.len())
                .filter(|&s| {
                    self.subjects[s]
                        .position
                        .is_some_and(|p| within(&p, &profile.position, &profile.range))
                })
                .collect()
        };
        for s in targets {
            self.capture(d, s, at)?;
        }
        Ok(())
    }

    fn withdraw(&mut self, s: usize, d: usize, at: Timestamp) -> Result<(), ScenarioError> {
        let data_type = self.script.devices[d].data_type;
        let device = self.devices[d].id;
        let queue = self.engine.queue();
        let Some(pdc) = self.subjects[s].pdc.as_mut() else {
            return Ok(());
        };
        if let Err(e) = pdc.withdraw(device, data_type, self.engine.state(), &queue, at) {
            let name = &self.script.subjects[s].name;
            self.report.notes.push(format!("t={at} {name} withdraw: {e}"));
        }
        self.engine.drain()?;
        Ok(())
    }

    fn evaluate_gate(&mut self, at: Timestamp) {
        let Some(room) = self.room else { return };
        let data_type = self.script.devices[room].data_type;
        let tally = self
            .present
            .iter()
            .filter(|&&s| {
                self.subjects[s]
                    .source(data_type)
                    .is_some_and(|src| self.evidence(room, src).is_some())
            })
            .count();
        let occupancy = self.present.len();
        self.gate_enabled = tally == occupancy;
        self.report.gate.push(GateChange {
            at,
            occupancy,
            tally,
            enabled: self.gate_enabled,
        });
    }

    fn collect_receipts(&mut self) {
        for (d, spec) in self.script.devices.iter().enumerate() {
            let dev = &self.devices[d];
            let log: Vec<Evidence> = match self.transport {
                Transport::Beacon => dev
                    .beacon
                    .iter()
                    .flat_map(|b| b.receipts())
                    .map(|r| Evidence {
                        subject: r.subject.clone(),
                        policy: r.policy.clone(),
                        timestamp: r.timestamp,
                    })
                    .collect(),
                Transport::Registry => dev
                    .client
                    .get_consents(&dev.id, 0)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|c| Evidence {
                        subject: c.subject,
                        policy: c.policy,
                        timestamp: c.timestamp,
                    })
                    .collect(),
            };
            self.report.receipts.insert(spec.name.clone(), log);
        }
    }
}
