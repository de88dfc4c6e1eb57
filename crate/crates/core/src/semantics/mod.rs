//! The executable transition system over [`SystemState`].
//!
//! [`apply`] checks an operation's precondition and, when it holds, builds the
//! successor state from the postcondition; anything the postcondition does not
//! mention is left untouched. A failed precondition is not an error: the
//! outcome is [`Outcome::Rejected`] naming the first clause that failed and the
//! state comes back unchanged.

mod oracle;
mod trace;

pub use oracle::check_postcondition;
pub use trace::{
    verify_trace, verify_trace_with, Engine, EngineError, OpQueue, Property, PropertyViolation,
    ReplayError, Step, Tamper, Trace, TraceEntry, TraceError, VerifyOptions,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{prefer, MaybePolicy, Policy, MAX_CONTROLLER_ID};
use crate::state::{
    within, CollectedKey, DataType, DeviceId, DeviceProfile, MaybeValue, Position, Stored,
    SubjectDeviceId, SubjectKey, SystemState, Timestamp,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    Install {
        device: DeviceId,
        #[serde(flatten)]
        profile: DeviceProfile,
    },
    Declare {
        device: DeviceId,
        #[serde(flatten)]
        profile: DeviceProfile,
    },
    Collect {
        device: DeviceId,
        subject: SubjectDeviceId,
        data_type: DataType,
        policy: MaybePolicy,
        value: MaybeValue,
    },
    Move {
        subject: SubjectDeviceId,
        position: Position,
    },
    Define {
        subject: SubjectDeviceId,
        data_type: DataType,
        policy: MaybePolicy,
        value: MaybeValue,
    },
    Pair {
        subject: SubjectDeviceId,
        host: SubjectDeviceId,
    },
    Require {
        host: SubjectDeviceId,
        source: SubjectDeviceId,
        device: DeviceId,
        data_type: DataType,
        policy: MaybePolicy,
        value: MaybeValue,
    },
}

impl Operation {
    pub fn name(&self) -> &'static str {
        match self {
            Operation::Install { .. } => "install",
            Operation::Declare { .. } => "declare",
            Operation::Collect { .. } => "collect",
            Operation::Move { .. } => "move",
            Operation::Define { .. } => "define",
            Operation::Pair { .. } => "pair",
            Operation::Require { .. } => "require",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// install: no declaration for the device
    NotDeclared,
    /// install: declared with a different tuple
    DeclarationMismatch,
    /// collect/require: `Config(δ)` undefined
    NotInstalled,
    /// collect/require: the device collects another data type
    DataTypeMismatch,
    /// collect/require: the subject device has no position
    NoPosition,
    /// collect/require: the subject device is outside the device range
    OutOfRange,
    /// collect: `Store_s(σ, θ)` differs from the communicated `(π, μ)`
    SubjectStoreMismatch,
    /// collect: `π ▷ π₁ = ⊥`
    UndefinedPolicy,
    /// require: `Store_c(δ, σ₂, θ)` holds nothing
    NothingStored,
    /// require: the host does not hold the required policy
    HostPolicyMismatch,
    /// require: the source device does not hold the required value
    SourceValueMismatch,
    /// require: `Paired(σ₂) ≠ σ₁`
    NotPaired,
}

impl RejectReason {
    pub fn describe(self) -> &'static str {
        match self {
            RejectReason::NotDeclared => "not declared",
            RejectReason::DeclarationMismatch => "declared with different parameters",
            RejectReason::NotInstalled => "device not installed",
            RejectReason::DataTypeMismatch => "device collects another data type",
            RejectReason::NoPosition => "subject device has no position",
            RejectReason::OutOfRange => "subject device out of range",
            RejectReason::SubjectStoreMismatch => "subject store does not hold the communicated policy and value",
            RejectReason::UndefinedPolicy => "no policy available for the data",
            RejectReason::NothingStored => "controller stores nothing for this subject",
            RejectReason::HostPolicyMismatch => "host device does not hold the required policy",
            RejectReason::SourceValueMismatch => "source device does not hold the required value",
            RejectReason::NotPaired => "source device not paired to host",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Applied,
    Rejected(RejectReason),
}

impl Outcome {
    pub fn is_applied(&self) -> bool {
        matches!(self, Outcome::Applied)
    }
}

/// Structurally invalid operation parameters.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedOperation {
    #[error("declared policy has no purpose")]
    NoPurpose,
    #[error("controller id longer than {MAX_CONTROLLER_ID} octets")]
    ControllerIdTooLong,
    #[error("subject identifier is empty or longer than 32 octets")]
    BadSubject,
    #[error("value does not fit data type {0:?}")]
    BadValue(DataType),
}

fn check_policy(p: &Policy, require_purpose: bool) -> Result<(), MalformedOperation> {
    if require_purpose && p.purposes.is_empty() {
        return Err(MalformedOperation::NoPurpose);
    }
    if p.controller_id.len() > MAX_CONTROLLER_ID {
        return Err(MalformedOperation::ControllerIdTooLong);
    }
    Ok(())
}

fn check_subject(s: &SubjectDeviceId) -> Result<(), MalformedOperation> {
    if s.is_well_formed() {
        Ok(())
    } else {
        Err(MalformedOperation::BadSubject)
    }
}

fn check_stored(
    data_type: DataType,
    policy: &MaybePolicy,
    value: &MaybeValue,
) -> Result<(), MalformedOperation> {
    if let Some(p) = policy {
        check_policy(p, false)?;
    }
    match value {
        Some(v) if !v.fits(data_type) => Err(MalformedOperation::BadValue(data_type)),
        _ => Ok(()),
    }
}

pub fn validate(op: &Operation) -> Result<(), MalformedOperation> {
    match op {
        Operation::Install { profile, .. } | Operation::Declare { profile, .. } => {
            check_policy(&profile.policy, true)
        }
        Operation::Collect {
            subject,
            data_type,
            policy,
            value,
            ..
        }
        | Operation::Define {
            subject,
            data_type,
            policy,
            value,
        } => {
            check_subject(subject)?;
            check_stored(*data_type, policy, value)
        }
        Operation::Move { subject, .. } => check_subject(subject),
        Operation::Pair { subject, host } => {
            check_subject(subject)?;
            check_subject(host)
        }
        Operation::Require {
            host,
            source,
            data_type,
            policy,
            value,
            ..
        } => {
            check_subject(host)?;
            check_subject(source)?;
            check_stored(*data_type, policy, value)
        }
    }
}

fn ensure(cond: bool, reason: RejectReason) -> Result<(), RejectReason> {
    if cond {
        Ok(())
    } else {
        Err(reason)
    }
}

/// Shared part of the collect and require preconditions: the device is
/// installed for `data_type` and `subject` stands inside its range.
fn installed_and_in_range<'a>(
    st: &'a SystemState,
    device: &DeviceId,
    data_type: DataType,
    subject: &SubjectDeviceId,
) -> Result<&'a DeviceProfile, RejectReason> {
    let config = st.config.get(device).ok_or(RejectReason::NotInstalled)?;
    ensure(config.data_type == data_type, RejectReason::DataTypeMismatch)?;
    let pos = st.position.get(subject).ok_or(RejectReason::NoPosition)?;
    ensure(within(pos, &config.position, &config.range), RejectReason::OutOfRange)?;
    Ok(config)
}

fn transition(st: &SystemState, op: &Operation) -> Result<SystemState, RejectReason> {
    let mut next = st.clone();
    match op {
        Operation::Install { device, profile } => {
            let declared = st.declared.get(device).ok_or(RejectReason::NotDeclared)?;
            ensure(declared == profile, RejectReason::DeclarationMismatch)?;
            next.config.insert(*device, profile.clone());
        }
        Operation::Declare { device, profile } => {
            next.declared.insert(*device, profile.clone());
            for (subject, pos) in &st.position {
                if within(pos, &profile.position, &profile.range) {
                    next.knows.insert((subject.clone(), *device), profile.clone());
                }
            }
        }
        Operation::Collect {
            device,
            subject,
            data_type,
            policy,
            value,
        } => {
            let config = installed_and_in_range(st, device, *data_type, subject)?;
            let held = st.store_s(subject, *data_type);
            ensure(
                held.policy == *policy && held.value == *value,
                RejectReason::SubjectStoreMismatch,
            )?;
            let key = CollectedKey {
                device: *device,
                subject: subject.clone(),
                data_type: *data_type,
            };
            let previous = st.store_c(&key);
            let effective = prefer(policy, &previous.policy).ok_or(RejectReason::UndefinedPolicy)?;
            let entry = if config.policy.implies(&effective) {
                Stored::new(Some(effective), value.clone())
            } else {
                Stored::UNDEFINED
            };
            next.set_store_c(key, entry);
        }
        Operation::Move { subject, position } => {
            next.position.insert(subject.clone(), *position);
            for (device, profile) in &st.declared {
                if within(position, &profile.position, &profile.range) {
                    next.knows.insert((subject.clone(), *device), profile.clone());
                }
            }
        }
        Operation::Define {
            subject,
            data_type,
            policy,
            value,
        } => {
            let previous = st.store_s(subject, *data_type);
            next.set_store_s(
                SubjectKey {
                    subject: subject.clone(),
                    data_type: *data_type,
                },
                Stored::new(prefer(policy, &previous.policy), prefer(value, &previous.value)),
            );
        }
        Operation::Pair { subject, host } => {
            next.set_paired(subject.clone(), host.clone());
        }
        Operation::Require {
            host,
            source,
            device,
            data_type,
            policy,
            value,
        } => {
            let config = st.config.get(device).ok_or(RejectReason::NotInstalled)?;
            ensure(config.data_type == *data_type, RejectReason::DataTypeMismatch)?;
            let key = CollectedKey {
                device: *device,
                subject: source.clone(),
                data_type: *data_type,
            };
            let previous = st.store_c(&key);
            ensure(!previous.is_undefined(), RejectReason::NothingStored)?;
            installed_and_in_range(st, device, *data_type, host)?;
            ensure(
                st.store_s(host, *data_type).policy == *policy,
                RejectReason::HostPolicyMismatch,
            )?;
            ensure(
                st.store_s(source, *data_type).value == *value,
                RejectReason::SourceValueMismatch,
            )?;
            ensure(st.paired(source) == *host, RejectReason::NotPaired)?;
            next.set_store_c(
                key,
                Stored::new(prefer(policy, &previous.policy), prefer(value, &previous.value)),
            );
        }
    }
    Ok(next)
}

/// Applies `op` to `st`. Pure: the result depends only on the arguments.
pub fn apply(
    st: &SystemState,
    op: &Operation,
) -> Result<(SystemState, Outcome), MalformedOperation> {
    validate(op)?;
    Ok(match transition(st, op) {
        Ok(next) => (next, Outcome::Applied),
        Err(reason) => (st.clone(), Outcome::Rejected(reason)),
    })
}

/// Deletes every controller-side entry whose retention delay has elapsed since
/// its last collection (`elapsed >= retention`). Entries without a policy carry
/// no retention commitment and are deleted as well. Returns the purged keys.
pub fn purge_expired(st: &SystemState, now: Timestamp) -> (SystemState, Vec<CollectedKey>) {
    let expired: Vec<CollectedKey> = st
        .store_c
        .iter()
        .filter(|(key, entry)| match &entry.policy {
            None => true,
            Some(p) => {
                let since = st.collected_at.get(*key).copied().unwrap_or(0);
                now.saturating_sub(since) >= u64::from(p.retention) * 1000
            }
        })
        .map(|(key, _)| key.clone())
        .collect();
    let mut next = st.clone();
    for key in &expired {
        next.store_c.remove(key);
        next.collected_at.remove(key);
    }
    (next, expired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ControllerCategory, Purpose, Recipient};
    use crate::state::{DataValue, Range};

    const DAY: u32 = 86_400;

    fn dc_policy(retention: u32) -> Policy {
        Policy {
            controller_id: "road-co".into(),
            controller_category: ControllerCategory::RoadOperator,
            purposes: [Purpose::Billing].into_iter().collect(),
            retention,
            recipients: [Recipient::ControllerOnly].into_iter().collect(),
            cross_border: false,
        }
    }

    fn ds_policy(retention: u32) -> Policy {
        Policy {
            controller_id: String::new(),
            controller_category: ControllerCategory::Other,
            purposes: [Purpose::Billing, Purpose::Analytics].into_iter().collect(),
            retention,
            recipients: [Recipient::ControllerOnly].into_iter().collect(),
            cross_border: false,
        }
    }

    fn cam() -> DeviceId {
        DeviceId::from_label("cam").unwrap()
    }

    fn plate() -> SubjectDeviceId {
        SubjectDeviceId::plate("AB-123-CD")
    }

    fn plate_value() -> Option<DataValue> {
        Some(DataValue(b"AB-123-CD".to_vec()))
    }

    fn profile(retention: u32) -> DeviceProfile {
        DeviceProfile {
            position: Position::from_meters(0.0, 0.0),
            range: Range::from_meters(10.0),
            data_type: DataType::PlateNumber,
            policy: dc_policy(retention),
        }
    }

    fn run(st: &SystemState, op: Operation) -> (SystemState, Outcome) {
        let (next, outcome) = apply(st, &op).unwrap();
        if outcome.is_applied() {
            assert!(check_postcondition(st, &op, &next), "{op:?}");
        } else {
            assert_eq!(&next, st);
        }
        (next, outcome)
    }

    /// Installed camera, plate in range holding `ds` as its policy.
    fn setup(ds: Option<Policy>) -> SystemState {
        let st = SystemState::new();
        let (st, _) = run(
            &st,
            Operation::Move {
                subject: plate(),
                position: Position::from_meters(3.0, 4.0),
            },
        );
        let (st, o1) = run(&st, Operation::Declare { device: cam(), profile: profile(30 * DAY) });
        let (st, o2) = run(&st, Operation::Install { device: cam(), profile: profile(30 * DAY) });
        assert_eq!((o1, o2), (Outcome::Applied, Outcome::Applied));
        let (st, _) = run(
            &st,
            Operation::Define {
                subject: plate(),
                data_type: DataType::PlateNumber,
                policy: ds,
                value: plate_value(),
            },
        );
        st
    }

    fn collect(policy: Option<Policy>) -> Operation {
        Operation::Collect {
            device: cam(),
            subject: plate(),
            data_type: DataType::PlateNumber,
            policy,
            value: plate_value(),
        }
    }

    fn key() -> CollectedKey {
        CollectedKey {
            device: cam(),
            subject: plate(),
            data_type: DataType::PlateNumber,
        }
    }

    #[test]
    fn install_requires_declaration() {
        let st = SystemState::new();
        let (next, outcome) = run(&st, Operation::Install { device: cam(), profile: profile(DAY) });
        assert_eq!(outcome, Outcome::Rejected(RejectReason::NotDeclared));
        assert_eq!(next, st);
        assert_eq!(RejectReason::NotDeclared.describe(), "not declared");
    }

    #[test]
    fn declare_informs_subjects_in_range() {
        let st = setup(None);
        assert_eq!(st.knows(&plate(), &cam()), Some(&profile(30 * DAY)));
    }

    #[test]
    fn compliant_collect_stores() {
        let st = setup(Some(ds_policy(90 * DAY)));
        let (st, outcome) = run(&st, collect(Some(ds_policy(90 * DAY))));
        assert_eq!(outcome, Outcome::Applied);
        assert_eq!(st.store_c(&key()), Stored::new(Some(ds_policy(90 * DAY)), plate_value()));
    }

    #[test]
    fn non_compliant_collect_discards() {
        let st = setup(Some(ds_policy(DAY)));
        let (st, outcome) = run(&st, collect(Some(ds_policy(DAY))));
        assert_eq!(outcome, Outcome::Applied);
        assert_eq!(st.store_c(&key()), Stored::UNDEFINED);
    }

    #[test]
    fn collect_without_policy_keeps_previous_one() {
        let mut st = setup(None);
        st.set_store_c(key(), Stored::new(Some(ds_policy(90 * DAY)), None));
        let (st, outcome) = run(&st, collect(None));
        assert_eq!(outcome, Outcome::Applied);
        assert_eq!(st.store_c(&key()).policy, Some(ds_policy(90 * DAY)));
    }

    #[test]
    fn collect_without_any_policy_is_rejected() {
        let st = setup(None);
        let (_, outcome) = run(&st, collect(None));
        assert_eq!(outcome, Outcome::Rejected(RejectReason::UndefinedPolicy));
    }

    #[test]
    fn collect_out_of_range_is_rejected() {
        let st = setup(Some(ds_policy(90 * DAY)));
        let (st, _) = run(
            &st,
            Operation::Move {
                subject: plate(),
                position: Position::from_meters(10.0, 0.1),
            },
        );
        let (_, outcome) = run(&st, collect(Some(ds_policy(90 * DAY))));
        assert_eq!(outcome, Outcome::Rejected(RejectReason::OutOfRange));
    }

    #[test]
    fn collect_must_carry_the_subject_policy() {
        let st = setup(Some(ds_policy(90 * DAY)));
        let (_, outcome) = run(&st, collect(Some(ds_policy(91 * DAY))));
        assert_eq!(outcome, Outcome::Rejected(RejectReason::SubjectStoreMismatch));
    }

    #[test]
    fn require_updates_policy_and_keeps_value() {
        let st = setup(Some(ds_policy(90 * DAY)));
        let (st, _) = run(&st, collect(Some(ds_policy(90 * DAY))));
        let zero = ds_policy(90 * DAY).with_zero_retention();
        let (st, _) = run(
            &st,
            Operation::Define {
                subject: plate(),
                data_type: DataType::PlateNumber,
                policy: Some(zero.clone()),
                value: None,
            },
        );
        let (st, outcome) = run(
            &st,
            Operation::Require {
                host: plate(),
                source: plate(),
                device: cam(),
                data_type: DataType::PlateNumber,
                policy: Some(zero.clone()),
                value: plate_value(),
            },
        );
        assert_eq!(outcome, Outcome::Applied);
        assert_eq!(st.store_c(&key()), Stored::new(Some(zero), plate_value()));
        let (st, purged) = purge_expired(&st, 0);
        assert_eq!(purged, vec![key()]);
        assert_eq!(st.store_c(&key()), Stored::UNDEFINED);
    }

    #[test]
    fn require_checks_pairing() {
        let phone = SubjectDeviceId::mac([2, 0, 0, 0, 0, 9]);
        let st = setup(Some(ds_policy(90 * DAY)));
        let (st, _) = run(&st, collect(Some(ds_policy(90 * DAY))));
        let (st, _) = run(&st, Operation::Move { subject: phone.clone(), position: Position::from_meters(1.0, 1.0) });
        let (st, _) = run(
            &st,
            Operation::Define {
                subject: phone.clone(),
                data_type: DataType::PlateNumber,
                policy: Some(ds_policy(0)),
                value: None,
            },
        );
        let require = Operation::Require {
            host: phone.clone(),
            source: plate(),
            device: cam(),
            data_type: DataType::PlateNumber,
            policy: Some(ds_policy(0)),
            value: plate_value(),
        };
        let (st, outcome) = run(&st, require.clone());
        assert_eq!(outcome, Outcome::Rejected(RejectReason::NotPaired));
        let (st, _) = run(&st, Operation::Pair { subject: plate(), host: phone });
        let (_, outcome) = run(&st, require);
        assert_eq!(outcome, Outcome::Applied);
    }

    #[test]
    fn require_on_empty_store_is_rejected() {
        let st = setup(Some(ds_policy(90 * DAY)));
        let (_, outcome) = run(
            &st,
            Operation::Require {
                host: plate(),
                source: plate(),
                device: cam(),
                data_type: DataType::PlateNumber,
                policy: Some(ds_policy(90 * DAY)),
                value: plate_value(),
            },
        );
        assert_eq!(outcome, Outcome::Rejected(RejectReason::NothingStored));
    }

    #[test]
    fn malformed_operations() {
        let mut bad = profile(DAY);
        bad.policy.purposes.clear();
        assert_eq!(
            apply(&SystemState::new(), &Operation::Declare { device: cam(), profile: bad }),
            Err(MalformedOperation::NoPurpose)
        );
        let op = Operation::Define {
            subject: SubjectDeviceId::mac([1, 2, 3, 4, 5, 6]),
            data_type: DataType::MacAddress,
            policy: None,
            value: Some(DataValue(vec![1, 2])),
        };
        assert_eq!(
            apply(&SystemState::new(), &op),
            Err(MalformedOperation::BadValue(DataType::MacAddress))
        );
    }

    #[test]
    fn purge_boundaries() {
        let mut st = SystemState::new();
        st.set_store_c(key(), Stored::new(Some(ds_policy(3600)), plate_value()));
        st.collected_at.insert(key(), 10_000);
        let (kept, purged) = purge_expired(&st, 10_000 + 3_599_000);
        assert!(purged.is_empty());
        assert_eq!(kept, st);
        let (gone, purged) = purge_expired(&st, 10_000 + 3_600_000);
        assert_eq!(purged, vec![key()]);
        assert!(gone.store_c.is_empty() && gone.collected_at.is_empty());

        let mut zero = SystemState::new();
        zero.set_store_c(key(), Stored::new(Some(ds_policy(0)), plate_value()));
        zero.collected_at.insert(key(), 5);
        assert_eq!(purge_expired(&zero, 5).1, vec![key()]);
    }

    #[test]
    fn operation_json_shape() {
        let op = collect(None);
        let json = serde_json::to_value(&op).unwrap();
        assert_eq!(json["op"], "collect");
        assert!(json["policy"].is_null());
        let back: Operation = serde_json::from_value(json).unwrap();
        assert_eq!(back, op);
        let install = Operation::Install { device: cam(), profile: profile(DAY) };
        let json = serde_json::to_value(&install).unwrap();
        assert_eq!(json["range"], 10.0);
        assert_eq!(serde_json::from_value::<Operation>(json).unwrap(), install);
    }
}
