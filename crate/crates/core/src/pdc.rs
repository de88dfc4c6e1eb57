//! Personal data custodian: decides on declarations from standing rules,
//! emits consents and builds withdrawal requests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beacon::{BeaconEndpoint, ConsentFrame, ConsentStatus};
use crate::policy::{ControllerCategory, Policy, Purpose};
use crate::registry::{ConsentSubmission, RegistryApi, RegistryError};
use crate::semantics::{OpQueue, Operation};
use crate::state::{
    DataType, DataValue, Declaration, DeviceId, Position, SubjectDeviceId, SystemState, Timestamp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerScope {
    Any,
    Category(ControllerCategory),
    Id(String),
}

impl ControllerScope {
    fn matches(&self, policy: &Policy) -> bool {
        match self {
            ControllerScope::Any => true,
            ControllerScope::Category(c) => policy.controller_category == *c,
            ControllerScope::Id(id) => policy.controller_id == *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleScope {
    pub data_type: DataType,
    pub controller: ControllerScope,
    /// Empty matches any declaration; otherwise the declared purposes must
    /// share at least one element.
    #[serde(default)]
    pub purposes: BTreeSet<Purpose>,
}

impl RuleScope {
    pub fn matches(&self, decl: &Declaration) -> bool {
        let p = &decl.profile.policy;
        decl.profile.data_type == self.data_type
            && self.controller.matches(p)
            && (self.purposes.is_empty() || !self.purposes.is_disjoint(&p.purposes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleDuration {
    Permanent,
    Once,
    Until(Timestamp),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRule {
    pub polarity: Polarity,
    pub scope: RuleScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<Policy>,
    pub duration: RuleDuration,
}

impl ConsentRule {
    pub fn positive(scope: RuleScope, bound: Policy, duration: RuleDuration) -> Self {
        ConsentRule {
            polarity: Polarity::Positive,
            scope,
            bound: Some(bound),
            duration,
        }
    }

    pub fn negative(scope: RuleScope, duration: RuleDuration) -> Self {
        ConsentRule {
            polarity: Polarity::Negative,
            scope,
            bound: None,
            duration,
        }
    }

    fn active(&self, now: Timestamp) -> bool {
        match self.duration {
            RuleDuration::Until(t) => now <= t,
            _ => true,
        }
    }

    fn validate(&self) -> Result<(), RuleError> {
        match (self.polarity, &self.bound) {
            (Polarity::Negative, Some(_)) => Err(RuleError::NegativeWithBound),
            (Polarity::Positive, None) => Err(RuleError::PositiveWithoutBound),
            (Polarity::Positive, Some(b)) if b.purposes.is_empty() => {
                Err(RuleError::EmptyBound)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("negative rules carry no bound")]
    NegativeWithBound,
    #[error("positive rules need a bound")]
    PositiveWithoutBound,
    #[error("a bound needs at least one purpose")]
    EmptyBound,
    #[error("rule {index}: {source}")]
    Invalid {
        index: usize,
        #[source]
        source: Box<RuleError>,
    },
    #[error("rule file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule file: {0}")]
    Io(#[from] std::io::Error),
}

pub fn parse_rules(text: &str) -> Result<Vec<ConsentRule>, RuleError> {
    let rules: Vec<ConsentRule> = serde_json::from_str(text)?;
    for (index, r) in rules.iter().enumerate() {
        r.validate().map_err(|e| RuleError::Invalid {
            index,
            source: Box::new(e),
        })?;
    }
    Ok(rules)
}

pub fn load_rules(path: &Path) -> Result<Vec<ConsentRule>, RuleError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    parse_rules(&std::fs::read_to_string(path)?)
}

pub fn save_rules(path: &Path, rules: &[ConsentRule]) -> Result<(), RuleError> {
    let mut text = serde_json::to_string_pretty(rules)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Consent(Policy),
    Refuse,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decided {
    pub decision: Decision,
    /// Index of the rule that produced the decision.
    pub rule: Option<usize>,
}

/// The rule bound specialised to the declaring controller.
pub fn instantiate(rule: &ConsentRule, decl: &Declaration) -> Option<Policy> {
    let bound = rule.bound.as_ref()?;
    Some(Policy {
        controller_id: decl.profile.policy.controller_id.clone(),
        controller_category: decl.profile.policy.controller_category,
        ..bound.clone()
    })
}

pub fn decide(rules: &[ConsentRule], decl: &Declaration, now: Timestamp) -> Decided {
    let live = || {
        rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.active(now) && r.scope.matches(decl))
    };
    if let Some((i, _)) = live().find(|(_, r)| r.polarity == Polarity::Negative) {
        return Decided {
            decision: Decision::Refuse,
            rule: Some(i),
        };
    }
    for (i, r) in live().filter(|(_, r)| r.polarity == Polarity::Positive) {
        if let Some(policy) = instantiate(r, decl) {
            if decl.profile.policy.implies(&policy) {
                return Decided {
                    decision: Decision::Consent(policy),
                    rule: Some(i),
                };
            }
        }
    }
    Decided {
        decision: Decision::Prompt,
        rule: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    AcceptOnce,
    AcceptAlways,
    RefuseOnce,
    RefuseAlways,
}

impl Answer {
    /// One-letter prompt answers: `a`/`A` accept once/always, `r`/`R` refuse.
    pub fn from_letter(letter: &str) -> Option<Answer> {
        match letter.trim() {
            "a" => Some(Answer::AcceptOnce),
            "A" => Some(Answer::AcceptAlways),
            "r" => Some(Answer::RefuseOnce),
            "R" => Some(Answer::RefuseAlways),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identifier {
    pub subject: SubjectDeviceId,
    pub value: DataValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingConsent {
    pub device_id: DeviceId,
    pub subject: SubjectDeviceId,
    pub policy: Policy,
    pub timestamp: Timestamp,
    pub nonce: [u8; 8],
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeliveryError {
    #[error("no response from the beacon")]
    NoResponse,
    #[error("beacon answered {0:?}")]
    Refused(ConsentStatus),
    #[error("registry: {0}")]
    Registry(RegistryError),
}

impl DeliveryError {
    fn transient(&self) -> bool {
        matches!(
            self,
            DeliveryError::NoResponse | DeliveryError::Registry(RegistryError::Unreachable(_))
        )
    }
}

pub trait ConsentChannel {
    fn deliver(&mut self, consent: &OutgoingConsent, now: Timestamp) -> Result<(), DeliveryError>;
}

/// Consent write to a beacon from the writer's current position.
pub struct BeaconChannel<'a> {
    pub beacon: &'a mut BeaconEndpoint,
    pub writer: Position,
}

impl ConsentChannel for BeaconChannel<'_> {
    fn deliver(&mut self, c: &OutgoingConsent, now: Timestamp) -> Result<(), DeliveryError> {
        let frame = ConsentFrame {
            device_id: c.device_id,
            subject: c.subject.clone(),
            timestamp: c.timestamp,
            nonce: c.nonce,
            policy: c.policy.clone(),
        };
        let bytes = frame
            .to_bytes()
            .map_err(|_| DeliveryError::Refused(ConsentStatus::Malformed))?;
        match self.beacon.write_consent(&self.writer, &bytes, now) {
            None => Err(DeliveryError::NoResponse),
            Some(ConsentStatus::Accepted) => Ok(()),
            Some(status) => Err(DeliveryError::Refused(status)),
        }
    }
}

pub struct RegistryChannel<'a> {
    pub api: &'a dyn RegistryApi,
}

impl ConsentChannel for RegistryChannel<'_> {
    fn deliver(&mut self, c: &OutgoingConsent, _now: Timestamp) -> Result<(), DeliveryError> {
        self.api
            .post_consent(ConsentSubmission {
                device_id: c.device_id,
                subject: c.subject.clone(),
                policy: c.policy.clone(),
                timestamp: c.timestamp,
            })
            .map(|_| ())
            .map_err(DeliveryError::Registry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmitError {
    #[error("no identifier configured for {0:?}")]
    MissingIdentifier(DataType),
    #[error("device {0} has not informed this gateway")]
    NotInformed(DeviceId),
    #[error("declared policy does not satisfy the consent")]
    NotImplied,
    #[error("delivery failed after {attempts} attempts: {last}")]
    Delivery { attempts: u32, last: DeliveryError },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WithdrawError {
    #[error("no identifier configured for {0:?}")]
    MissingIdentifier(DataType),
    #[error("no consent recorded for {0:?}")]
    NoConsent(DataType),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOutcome {
    pub decision: Decision,
    pub appended: Option<ConsentRule>,
}

pub const DEFAULT_ATTEMPTS: u32 = 3;

/// One custodian per gateway device.
pub struct Pdc {
    gateway: SubjectDeviceId,
    rules: Vec<ConsentRule>,
    vault: BTreeMap<DataType, Identifier>,
    rng: ChaCha8Rng,
    attempts: u32,
}

impl Pdc {
    pub fn new(gateway: SubjectDeviceId, seed: u64) -> Self {
        Pdc {
            gateway,
            rules: Vec::new(),
            vault: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            attempts: DEFAULT_ATTEMPTS,
        }
    }

    pub fn with_rules(mut self, rules: Vec<ConsentRule>) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_attempts(mut self, attempts: u32) -> Self {
        self.attempts = attempts.max(1);
        self
    }

    pub fn gateway(&self) -> &SubjectDeviceId {
        &self.gateway
    }

    pub fn rules(&self) -> &[ConsentRule] {
        &self.rules
    }

    pub fn configure_identifier(&mut self, data_type: DataType, subject: SubjectDeviceId, value: DataValue) {
        self.vault.insert(data_type, Identifier { subject, value });
    }

    pub fn identifier(&self, data_type: DataType) -> Option<&Identifier> {
        self.vault.get(&data_type)
    }

    /// Decides and consumes a matched ONCE rule.
    pub fn evaluate(&mut self, decl: &Declaration, now: Timestamp) -> Decision {
        let decided = decide(&self.rules, decl, now);
        if let Some(i) = decided.rule {
            if self.rules[i].duration == RuleDuration::Once {
                self.rules.remove(i);
            }
        }
        decided.decision
    }

    pub fn handle_prompt(&mut self, decl: &Declaration, answer: Answer) -> PromptOutcome {
        let scope = RuleScope {
            data_type: decl.profile.data_type,
            controller: ControllerScope::Id(decl.profile.policy.controller_id.clone()),
            purposes: decl.profile.policy.purposes.clone(),
        };
        let bound = decl.profile.policy.clone();
        let rule = match answer {
            Answer::AcceptOnce => ConsentRule::positive(scope, bound, RuleDuration::Once),
            Answer::AcceptAlways => ConsentRule::positive(scope, bound, RuleDuration::Permanent),
            Answer::RefuseOnce => ConsentRule::negative(scope, RuleDuration::Once),
            Answer::RefuseAlways => ConsentRule::negative(scope, RuleDuration::Permanent),
        };
        // ONCE rules are decided against and dropped immediately.
        let decision = decide(std::slice::from_ref(&rule), decl, 0).decision;
        let appended = (rule.duration == RuleDuration::Permanent).then(|| {
            self.rules.push(rule.clone());
            rule
        });
        PromptOutcome { decision, appended }
    }

    fn nonce(&mut self) -> [u8; 8] {
        let mut n = [0u8; 8];
        self.rng.fill_bytes(&mut n);
        n
    }

    /// Sends `policy` to the declaring device and enqueues the matching
    /// `Define` operations. Nothing is sent unless the gateway has been
    /// informed of this exact declaration.
    pub fn emit_consent(
        &mut self,
        policy: &Policy,
        decl: &Declaration,
        state: &SystemState,
        channel: &mut dyn ConsentChannel,
        queue: &OpQueue,
        now: Timestamp,
    ) -> Result<Vec<Operation>, EmitError> {
        let data_type = decl.profile.data_type;
        let id = self
            .vault
            .get(&data_type)
            .cloned()
            .ok_or(EmitError::MissingIdentifier(data_type))?;
        if state.knows(&self.gateway, &decl.device_id) != Some(&decl.profile) {
            return Err(EmitError::NotInformed(decl.device_id));
        }
        if !decl.profile.policy.implies(policy) {
            return Err(EmitError::NotImplied);
        }
        let consent = OutgoingConsent {
            device_id: decl.device_id,
            subject: id.subject.clone(),
            policy: policy.clone(),
            timestamp: now,
            nonce: self.nonce(),
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            match channel.deliver(&consent, now) {
                Ok(()) => break,
                Err(e) if e.transient() && attempt < self.attempts => continue,
                Err(last) => {
                    return Err(EmitError::Delivery {
                        attempts: attempt,
                        last,
                    })
                }
            }
        }
        let mut ops = vec![Operation::Define {
            subject: id.subject.clone(),
            data_type,
            policy: Some(policy.clone()),
            value: Some(id.value.clone()),
        }];
        if id.subject != self.gateway {
            ops.push(Operation::Define {
                subject: self.gateway.clone(),
                data_type,
                policy: Some(policy.clone()),
                value: None,
            });
        }
        for op in &ops {
            queue.enqueue(now, op.clone());
        }
        Ok(ops)
    }

    /// Revokes the consent given for `(device, data_type)`: the stored bound
    /// is re-defined with zero retention and a `Require` carries it to the
    /// device.
    pub fn withdraw(
        &mut self,
        device: DeviceId,
        data_type: DataType,
        state: &SystemState,
        queue: &OpQueue,
        now: Timestamp,
    ) -> Result<Vec<Operation>, WithdrawError> {
        let id = self
            .vault
            .get(&data_type)
            .cloned()
            .ok_or(WithdrawError::MissingIdentifier(data_type))?;
        let current = state.store_s(&id.subject, data_type);
        let bound = current.policy.ok_or(WithdrawError::NoConsent(data_type))?;
        let zero = Some(bound.with_zero_retention());

        let mut ops = vec![Operation::Define {
            subject: self.gateway.clone(),
            data_type,
            policy: zero.clone(),
            value: None,
        }];
        if id.subject != self.gateway {
            ops.push(Operation::Define {
                subject: id.subject.clone(),
                data_type,
                policy: zero.clone(),
                value: None,
            });
        }
        ops.push(Operation::Require {
            host: self.gateway.clone(),
            source: id.subject.clone(),
            device,
            data_type,
            policy: zero,
            value: current.value,
        });
        for op in &ops {
            queue.enqueue(now, op.clone());
        }
        Ok(ops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Recipient;
    use crate::state::{DeviceProfile, Range};

    fn museum_policy(purposes: &[Purpose], retention: u32) -> Policy {
        Policy {
            controller_id: "MUSE-LOUVRE".into(),
            controller_category: ControllerCategory::Museum,
            purposes: purposes.iter().copied().collect(),
            retention,
            recipients: [Recipient::ControllerOnly].into_iter().collect(),
            cross_border: false,
        }
    }

    fn decl(data_type: DataType, policy: Policy) -> Declaration {
        Declaration {
            device_id: DeviceId::from_label("wifi-hall").unwrap(),
            profile: DeviceProfile {
                position: Position::from_meters(0.0, 0.0),
                range: Range::from_meters(10.0),
                data_type,
                policy,
            },
        }
    }

    fn counting_rule() -> ConsentRule {
        ConsentRule::positive(
            RuleScope {
                data_type: DataType::MacAddress,
                controller: ControllerScope::Category(ControllerCategory::Museum),
                purposes: [Purpose::CountingVisitors].into_iter().collect(),
            },
            Policy {
                controller_id: String::new(),
                controller_category: ControllerCategory::Museum,
                purposes: [Purpose::CountingVisitors].into_iter().collect(),
                retention: 90 * 86_400,
                recipients: [Recipient::ControllerOnly].into_iter().collect(),
                cross_border: false,
            },
            RuleDuration::Permanent,
        )
    }

    #[test]
    fn generic_museum_rule_instantiates() {
        let d = decl(DataType::MacAddress, museum_policy(&[Purpose::CountingVisitors], 30 * 86_400));
        let got = decide(&[counting_rule()], &d, 0);
        let Decision::Consent(p) = got.decision else {
            panic!("expected consent, got {:?}", got.decision)
        };
        assert_eq!(p.controller_id, "MUSE-LOUVRE");
        assert_eq!(p.retention, 90 * 86_400);
        assert_eq!(got.rule, Some(0));
    }

    #[test]
    fn extra_purpose_prompts() {
        let d = decl(
            DataType::MacAddress,
            museum_policy(&[Purpose::CountingVisitors, Purpose::Profiling], 30 * 86_400),
        );
        assert_eq!(decide(&[counting_rule()], &d, 0).decision, Decision::Prompt);
    }

    #[test]
    fn negative_beats_positive() {
        let camera = decl(DataType::Image, museum_policy(&[Purpose::Security], 86_400));
        let mut positive = counting_rule();
        positive.scope.data_type = DataType::Image;
        positive.scope.purposes.clear();
        positive.bound.as_mut().unwrap().purposes = [Purpose::Security].into_iter().collect();
        let negative = ConsentRule::negative(
            RuleScope {
                data_type: DataType::Image,
                controller: ControllerScope::Any,
                purposes: BTreeSet::new(),
            },
            RuleDuration::Permanent,
        );
        assert!(matches!(decide(&[positive.clone()], &camera, 0).decision, Decision::Consent(_)));
        let got = decide(&[positive, negative], &camera, 0);
        assert_eq!(got, Decided { decision: Decision::Refuse, rule: Some(1) });
    }

    #[test]
    fn expired_until_rules_are_ignored() {
        let d = decl(DataType::MacAddress, museum_policy(&[Purpose::CountingVisitors], 86_400));
        let mut rule = counting_rule();
        rule.duration = RuleDuration::Until(1_000);
        assert!(matches!(decide(&[rule.clone()], &d, 1_000).decision, Decision::Consent(_)));
        assert_eq!(decide(&[rule], &d, 1_001).decision, Decision::Prompt);
    }

    #[test]
    fn instantiate_only_touches_identity() {
        let d = decl(DataType::MacAddress, museum_policy(&[Purpose::CountingVisitors], 86_400));
        let mut rule = counting_rule();
        let p = instantiate(&rule, &d).unwrap();
        let bound = rule.bound.clone().unwrap();
        assert_eq!((p.purposes.clone(), p.retention, p.recipients.clone()), (bound.purposes, bound.retention, bound.recipients));
        rule.bound.as_mut().unwrap().controller_id = "MUSE-LOUVRE".into();
        assert_eq!(instantiate(&rule, &d).unwrap(), p);
    }

    #[test]
    fn prompts_once_and_always() {
        let d = decl(DataType::MacAddress, museum_policy(&[Purpose::Analytics], 86_400));
        let mut pdc = Pdc::new(SubjectDeviceId::mac([2, 0, 0, 0, 0, 1]), 1);
        assert_eq!(pdc.evaluate(&d, 0), Decision::Prompt);
        let once = pdc.handle_prompt(&d, Answer::AcceptOnce);
        assert_eq!(once.decision, Decision::Consent(d.profile.policy.clone()));
        assert!(once.appended.is_none());
        assert_eq!(pdc.evaluate(&d, 1), Decision::Prompt);

        let always = pdc.handle_prompt(&d, Answer::AcceptAlways);
        assert!(always.appended.is_some());
        assert!(matches!(pdc.evaluate(&d, 2), Decision::Consent(_)));

        let refuse = pdc.handle_prompt(&d, Answer::RefuseAlways);
        assert_eq!(refuse.decision, Decision::Refuse);
        assert_eq!(refuse.appended.unwrap().polarity, Polarity::Negative);
        assert_eq!(pdc.evaluate(&d, 3), Decision::Refuse);
    }

    #[test]
    fn once_rule_is_consumed_by_one_decision() {
        let d = decl(DataType::MacAddress, museum_policy(&[Purpose::CountingVisitors], 86_400));
        let mut rule = counting_rule();
        rule.duration = RuleDuration::Once;
        let mut pdc = Pdc::new(SubjectDeviceId::mac([2, 0, 0, 0, 0, 1]), 1).with_rules(vec![rule]);
        assert!(matches!(pdc.evaluate(&d, 0), Decision::Consent(_)));
        assert_eq!(pdc.evaluate(&d, 0), Decision::Prompt);
        assert!(pdc.rules().is_empty());
    }

    #[test]
    fn rule_file_validation() {
        let ok = serde_json::to_string(&vec![counting_rule()]).unwrap();
        assert_eq!(parse_rules(&ok).unwrap(), vec![counting_rule()]);
        let mut bad = ConsentRule::negative(counting_rule().scope, RuleDuration::Permanent);
        bad.bound = counting_rule().bound;
        let text = serde_json::to_string(&vec![bad]).unwrap();
        assert!(matches!(parse_rules(&text), Err(RuleError::Invalid { index: 0, .. })));
        assert!(parse_rules("{").is_err());
    }
}
