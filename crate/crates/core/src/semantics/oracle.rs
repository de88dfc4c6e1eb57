//! Postcondition predicates evaluated directly on a `(before, after)` pair.
//!
//! Nothing here calls into the transition code: each arm restates the
//! postcondition as a predicate and adds the frame condition that every entry
//! not named by it is unchanged.

use std::collections::{BTreeMap, BTreeSet};

use crate::policy::prefer;
use crate::state::{within, CollectedKey, DeviceId, Stored, SubjectDeviceId, SubjectKey, SystemState};

use super::Operation;

/// Keys each map is allowed to change under one operation.
#[derive(Default)]
struct Frame {
    config: BTreeSet<DeviceId>,
    declared: BTreeSet<DeviceId>,
    knows: BTreeSet<(SubjectDeviceId, DeviceId)>,
    position: BTreeSet<SubjectDeviceId>,
    paired: BTreeSet<SubjectDeviceId>,
    store_c: BTreeSet<CollectedKey>,
    store_s: BTreeSet<SubjectKey>,
}

fn same_outside<K: Ord, V: PartialEq>(
    before: &BTreeMap<K, V>,
    after: &BTreeMap<K, V>,
    allowed: &BTreeSet<K>,
) -> bool {
    let left = before.iter().filter(|(k, _)| !allowed.contains(*k));
    let right = after.iter().filter(|(k, _)| !allowed.contains(*k));
    left.eq(right)
}

impl Frame {
    fn holds(&self, before: &SystemState, after: &SystemState) -> bool {
        same_outside(&before.config, &after.config, &self.config)
            && same_outside(&before.declared, &after.declared, &self.declared)
            && same_outside(&before.knows, &after.knows, &self.knows)
            && same_outside(&before.position, &after.position, &self.position)
            && same_outside(&before.paired, &after.paired, &self.paired)
            && same_outside(&before.store_c, &after.store_c, &self.store_c)
            && same_outside(&before.store_s, &after.store_s, &self.store_s)
    }
}

/// True iff `after` satisfies the postcondition of `op` from `before`,
/// including the frame rule. Only meaningful for applied operations.
pub fn check_postcondition(before: &SystemState, op: &Operation, after: &SystemState) -> bool {
    let mut frame = Frame::default();
    let post = match op {
        Operation::Install { device, profile } => {
            frame.config.insert(*device);
            after.config.get(device) == Some(profile)
        }
        Operation::Declare { device, profile } => {
            frame.declared.insert(*device);
            let informed: Vec<&SubjectDeviceId> = before
                .position
                .iter()
                .filter(|(_, at)| within(at, &profile.position, &profile.range))
                .map(|(subject, _)| subject)
                .collect();
            frame
                .knows
                .extend(informed.iter().map(|s| ((*s).clone(), *device)));
            after.declared.get(device) == Some(profile)
                && informed
                    .iter()
                    .all(|s| after.knows.get(&((*s).clone(), *device)) == Some(profile))
        }
        Operation::Collect {
            device,
            subject,
            data_type,
            policy,
            value,
        } => {
            let key = CollectedKey {
                device: *device,
                subject: subject.clone(),
                data_type: *data_type,
            };
            frame.store_c.insert(key.clone());
            let held = before.store_c.get(&key).and_then(|e| e.policy.clone());
            let Some(effective) = prefer(policy, &held) else {
                return false;
            };
            let Some(config) = before.config.get(device) else {
                return false;
            };
            let expected = if config.policy.implies(&effective) {
                Stored {
                    policy: Some(effective),
                    value: value.clone(),
                }
            } else {
                Stored::UNDEFINED
            };
            after.store_c(&key) == expected
        }
        Operation::Move { subject, position } => {
            frame.position.insert(subject.clone());
            let covering: Vec<_> = before
                .declared
                .iter()
                .filter(|(_, profile)| within(position, &profile.position, &profile.range))
                .collect();
            frame
                .knows
                .extend(covering.iter().map(|(d, _)| (subject.clone(), **d)));
            after.position.get(subject) == Some(position)
                && covering
                    .iter()
                    .all(|(d, profile)| after.knows.get(&(subject.clone(), **d)) == Some(*profile))
        }
        Operation::Define {
            subject,
            data_type,
            policy,
            value,
        } => {
            let key = SubjectKey {
                subject: subject.clone(),
                data_type: *data_type,
            };
            frame.store_s.insert(key.clone());
            let old = before.store_s.get(&key).cloned().unwrap_or_default();
            let expected = Stored {
                policy: prefer(policy, &old.policy),
                value: prefer(value, &old.value),
            };
            after.store_s.get(&key).cloned().unwrap_or_default() == expected
        }
        Operation::Pair { subject, host } => {
            frame.paired.insert(subject.clone());
            after.paired.get(subject).unwrap_or(subject) == host
        }
        Operation::Require {
            source,
            device,
            data_type,
            policy,
            value,
            ..
        } => {
            let key = CollectedKey {
                device: *device,
                subject: source.clone(),
                data_type: *data_type,
            };
            frame.store_c.insert(key.clone());
            let old = before.store_c.get(&key).cloned().unwrap_or_default();
            let expected = Stored {
                policy: prefer(policy, &old.policy),
                value: prefer(value, &old.value),
            };
            after.store_c(&key) == expected
        }
    };
    post && frame.holds(before, after)
}
