//! Seeded random generators for policies, declarations, states and
//! operations. Used by the property suites and the benchmarks.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::beacon::AdvertisementFragment;
use crate::policy::{ControllerCategory, Policy, Purpose, Recipient};
use crate::semantics::{apply, Operation};
use crate::state::{
    DataType, DataValue, Declaration, DeviceId, DeviceProfile, MaybeValue, Position, Range,
    subjects_in_range, SubjectDeviceId, SystemState,
};

fn subset<T: Copy + Ord, R: Rng>(rng: &mut R, all: &[T], non_empty: bool) -> BTreeSet<T> {
    loop {
        let s: BTreeSet<T> = all.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
        if !non_empty || !s.is_empty() {
            return s;
        }
    }
}

const RETENTIONS: &[u32] = &[0, 3_600, 86_400, 7 * 86_400, 30 * 86_400, 365 * 86_400];
const CONTROLLERS: &[&str] = &["", "MUSE", "AUTOROUTE-A7", "MALL-NORD", "ACME-HQ"];

pub fn policy<R: Rng>(rng: &mut R) -> Policy {
    Policy {
        controller_id: CONTROLLERS.choose(rng).unwrap().to_string(),
        controller_category: *ControllerCategory::ALL.choose(rng).unwrap(),
        purposes: subset(rng, Purpose::ALL, true),
        retention: if rng.random_bool(0.5) {
            *RETENTIONS.choose(rng).unwrap()
        } else {
            rng.random_range(0..=400 * 86_400)
        },
        recipients: subset(rng, Recipient::ALL, false),
        cross_border: rng.random_bool(0.3),
    }
}

/// A policy with an arbitrary controller id of up to 32 octets.
pub fn wide_policy<R: Rng>(rng: &mut R) -> Policy {
    let len = rng.random_range(0..=32);
    let id: String = (0..len)
        .map(|_| rng.random_range(b'!'..=b'~') as char)
        .collect();
    Policy {
        controller_id: id,
        ..policy(rng)
    }
}

/// A policy the given one implies: same controller, weaker on every field.
pub fn weaken<R: Rng>(rng: &mut R, p: &Policy) -> Policy {
    let mut out = p.clone();
    out.purposes.extend(subset(rng, Purpose::ALL, false));
    out.recipients.extend(subset(rng, Recipient::ALL, false));
    out.retention = p.retention.saturating_add(rng.random_range(0..=86_400));
    out.cross_border |= rng.random_bool(0.3);
    if rng.random_bool(0.2) {
        out.controller_id.clear();
    }
    if rng.random_bool(0.2) {
        out.controller_category = ControllerCategory::Other;
    }
    out
}

pub fn position<R: Rng>(rng: &mut R, half_extent_cm: i32) -> Position {
    Position::from_cm(
        rng.random_range(-half_extent_cm..=half_extent_cm),
        rng.random_range(-half_extent_cm..=half_extent_cm),
    )
}

pub fn declaration<R: Rng>(rng: &mut R) -> Declaration {
    let mut id = [0u8; 16];
    rng.fill(&mut id);
    Declaration {
        device_id: DeviceId(id),
        profile: DeviceProfile {
            position: Position::from_cm(rng.random(), rng.random()),
            range: Range::from_decimeters(rng.random()),
            data_type: *DataType::ALL.choose(rng).unwrap(),
            policy: wide_policy(rng),
        },
    }
}

/// Fragments shuffled with some duplicated.
pub fn scramble<R: Rng>(rng: &mut R, frags: &[AdvertisementFragment]) -> Vec<AdvertisementFragment> {
    let mut out = frags.to_vec();
    for f in frags {
        if rng.random_bool(0.3) {
            out.push(f.clone());
        }
    }
    out.shuffle(rng);
    out
}

pub fn value<R: Rng>(rng: &mut R, data_type: DataType) -> DataValue {
    match data_type {
        DataType::MacAddress => DataValue((0..6).map(|_| rng.random()).collect()),
        DataType::PlateNumber => DataValue(format!("PL-{:03}", rng.random_range(0..1000)).into_bytes()),
        _ => DataValue((0..rng.random_range(0..8)).map(|_| rng.random()).collect()),
    }
}

/// A small closed world: fixed devices with stable profiles and a handful of
/// subject devices, packed so that ranges overlap often.
#[derive(Debug, Clone)]
pub struct Universe {
    pub devices: Vec<(DeviceId, DeviceProfile)>,
    pub subjects: Vec<SubjectDeviceId>,
}

pub fn universe<R: Rng>(rng: &mut R, devices: usize, subjects: usize) -> Universe {
    let devices = (0..devices)
        .map(|i| {
            let id = DeviceId::from_label(&format!("dev-{i}")).unwrap();
            let profile = DeviceProfile {
                position: position(rng, 1_000),
                range: Range::from_decimeters(rng.random_range(30..=120)),
                data_type: *[DataType::MacAddress, DataType::PlateNumber, DataType::Sound]
                    .choose(rng)
                    .unwrap(),
                policy: policy(rng),
            };
            (id, profile)
        })
        .collect();
    let subjects = (0..subjects)
        .map(|i| {
            if i % 2 == 0 {
                SubjectDeviceId::mac([2, 0, 0, 0, 0, i as u8])
            } else {
                SubjectDeviceId::plate(&format!("SUBJ-{i}"))
            }
        })
        .collect();
    Universe { devices, subjects }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Install,
    Declare,
    Collect,
    Move,
    Define,
    Pair,
    Require,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Install,
        OpKind::Declare,
        OpKind::Collect,
        OpKind::Move,
        OpKind::Define,
        OpKind::Pair,
        OpKind::Require,
    ];

    pub fn of(op: &Operation) -> OpKind {
        match op {
            Operation::Install { .. } => OpKind::Install,
            Operation::Declare { .. } => OpKind::Declare,
            Operation::Collect { .. } => OpKind::Collect,
            Operation::Move { .. } => OpKind::Move,
            Operation::Define { .. } => OpKind::Define,
            Operation::Pair { .. } => OpKind::Pair,
            Operation::Require { .. } => OpKind::Require,
        }
    }
}

impl Universe {
    fn device<R: Rng>(&self, rng: &mut R) -> &(DeviceId, DeviceProfile) {
        self.devices.choose(rng).unwrap()
    }

    fn subject<R: Rng>(&self, rng: &mut R) -> &SubjectDeviceId {
        self.subjects.choose(rng).unwrap()
    }

    fn data_type<R: Rng>(&self, rng: &mut R) -> DataType {
        self.device(rng).1.data_type
    }

    fn maybe_value<R: Rng>(&self, rng: &mut R, data_type: DataType) -> MaybeValue {
        rng.random_bool(0.85).then(|| value(rng, data_type))
    }

    /// An operation of `kind`, biased towards satisfying its precondition
    /// in `st`. With `stable` set, declarations and installs always use the
    /// universe profiles.
    pub fn operation<R: Rng>(
        &self,
        rng: &mut R,
        st: &SystemState,
        kind: OpKind,
        stable: bool,
    ) -> Operation {
        match kind {
            OpKind::Install => {
                let (device, profile) = self.device(rng).clone();
                let profile = if !stable && rng.random_bool(0.2) {
                    DeviceProfile {
                        policy: policy(rng),
                        ..profile
                    }
                } else {
                    profile
                };
                Operation::Install { device, profile }
            }
            OpKind::Declare => {
                let (device, profile) = self.device(rng).clone();
                let profile = if !stable && rng.random_bool(0.1) {
                    DeviceProfile {
                        range: Range::from_decimeters(rng.random_range(0..200)),
                        ..profile
                    }
                } else {
                    profile
                };
                Operation::Declare { device, profile }
            }
            OpKind::Move => {
                let (_, near) = self.device(rng);
                let at = if rng.random_bool(0.7) {
                    let r = near.range.decimeters as i32 * 10 + 50;
                    near.position.offset(rng.random_range(-r..=r), rng.random_range(-r..=r))
                } else {
                    position(rng, 1_500)
                };
                Operation::Move {
                    subject: self.subject(rng).clone(),
                    position: at,
                }
            }
            OpKind::Pair => Operation::Pair {
                subject: self.subject(rng).clone(),
                host: self.subject(rng).clone(),
            },
            OpKind::Define => {
                let (_, profile) = self.device(rng);
                let data_type = profile.data_type;
                let p = match rng.random_range(0..10) {
                    0 => None,
                    1..=5 => Some(weaken(rng, &profile.policy)),
                    6 => Some(profile.policy.with_zero_retention()),
                    _ => Some(policy(rng)),
                };
                Operation::Define {
                    subject: self.subject(rng).clone(),
                    data_type,
                    policy: p,
                    value: self.maybe_value(rng, data_type),
                }
            }
            OpKind::Collect => {
                let (device, profile) = self.device(rng);
                let near: Vec<_> = subjects_in_range(st, &profile.position, &profile.range)
                    .into_iter()
                    .filter(|s| st.knows(s, device).is_some())
                    .collect();
                let subject = match near.choose(rng) {
                    Some(s) if rng.random_bool(0.7) => s.clone(),
                    _ => self.subject(rng).clone(),
                };
                let data_type = if rng.random_bool(0.9) {
                    profile.data_type
                } else {
                    self.data_type(rng)
                };
                let held = st.store_s(&subject, data_type);
                let (p, v) = if rng.random_bool(0.8) {
                    (held.policy, held.value)
                } else {
                    (rng.random_bool(0.5).then(|| policy(rng)), self.maybe_value(rng, data_type))
                };
                Operation::Collect {
                    device: *device,
                    subject,
                    data_type,
                    policy: p,
                    value: v,
                }
            }
            OpKind::Require => {
                let stored: Vec<_> = st.store_c.keys().cloned().collect();
                let (device, source, data_type) = match stored.choose(rng) {
                    Some(k) if rng.random_bool(0.8) => (k.device, k.subject.clone(), k.data_type),
                    _ => {
                        let (device, profile) = self.device(rng);
                        (*device, self.subject(rng).clone(), profile.data_type)
                    }
                };
                let host = if rng.random_bool(0.8) {
                    st.paired(&source)
                } else {
                    self.subject(rng).clone()
                };
                let p = if rng.random_bool(0.8) {
                    st.store_s(&host, data_type).policy
                } else {
                    Some(policy(rng))
                };
                let v = if rng.random_bool(0.8) {
                    st.store_s(&source, data_type).value
                } else {
                    self.maybe_value(rng, data_type)
                };
                Operation::Require {
                    host,
                    source,
                    device,
                    data_type,
                    policy: p,
                    value: v,
                }
            }
        }
    }

    pub fn random_kind<R: Rng>(rng: &mut R) -> OpKind {
        // weighted towards moves, defines and collects
        const WEIGHTED: [OpKind; 12] = [
            OpKind::Install,
            OpKind::Declare,
            OpKind::Move,
            OpKind::Move,
            OpKind::Move,
            OpKind::Define,
            OpKind::Define,
            OpKind::Collect,
            OpKind::Collect,
            OpKind::Collect,
            OpKind::Pair,
            OpKind::Require,
        ];
        *WEIGHTED.choose(rng).unwrap()
    }

    /// Moves a subject into an installed device's range, defines a policy
    /// the device satisfies and collects, so the controller store holds at
    /// least one entry. Leaves `st` alone when nothing is installed.
    pub fn prime<R: Rng>(&self, rng: &mut R, st: &SystemState) -> SystemState {
        let installed: Vec<_> = self
            .devices
            .iter()
            .filter(|(d, _)| st.config.contains_key(d))
            .collect();
        let Some((device, profile)) = installed.choose(rng) else {
            return st.clone();
        };
        let subject = self.subject(rng).clone();
        let policy = Some(weaken(rng, &profile.policy));
        let value = Some(value(rng, profile.data_type));
        let ops = [
            Operation::Move { subject: subject.clone(), position: profile.position },
            Operation::Define {
                subject: subject.clone(),
                data_type: profile.data_type,
                policy: policy.clone(),
                value: value.clone(),
            },
            Operation::Collect {
                device: *device,
                subject,
                data_type: profile.data_type,
                policy,
                value,
            },
        ];
        let mut st = st.clone();
        for op in &ops {
            st = apply(&st, op).expect("generated ops are well formed").0;
        }
        st
    }

    /// State reached by `steps` random operations through `apply`.
    pub fn state<R: Rng>(&self, rng: &mut R, steps: usize, stable: bool) -> SystemState {
        let mut st = SystemState::new();
        // declare and install most devices up front
        for (device, profile) in &self.devices {
            if rng.random_bool(0.8) {
                for op in [
                    Operation::Declare { device: *device, profile: profile.clone() },
                    Operation::Install { device: *device, profile: profile.clone() },
                ] {
                    st = apply(&st, &op).expect("generated ops are well formed").0;
                }
            }
        }
        for _ in 0..steps {
            let kind = Self::random_kind(rng);
            let op = self.operation(rng, &st, kind, stable);
            st = apply(&st, &op).expect("generated ops are well formed").0;
        }
        st
    }
}
