//! Direct communication: declarations broadcast as advertisement fragments and
//! consents written back over a short connection.
//!
//! Advertisement frame (at most 31 octets):
//!
//! ```text
//! 0x50 0x42 | version | declaration_id (u32 BE) | frag_index | frag_count | payload_len | payload
//! ```
//!
//! The reassembled payload is a TLV stream: 0x01 device id (16), 0x02 position
//! (two i32 BE centimeters), 0x03 range (u16 BE decimeters), 0x04 data type,
//! 0x05 policy TLV.
//!
//! Consent frame:
//!
//! ```text
//! 0x50 0x43 | version | device_id (16) | subject_kind | subject_len | subject_value
//!           | timestamp (u64 BE ms) | nonce (8) | policy TLV
//! ```

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::{decode_policy, encode_policy, Policy, TlvError};
use crate::state::{
    within, DataType, Declaration, DeviceId, DeviceProfile, Position, Range, SubjectDeviceId,
    Timestamp, MAX_SUBJECT_VALUE,
};

pub const ADV_MAGIC: [u8; 2] = [0x50, 0x42];
pub const CONSENT_MAGIC: [u8; 2] = [0x50, 0x43];
pub const VERSION: u8 = 0x01;
pub const MAX_FRAME: usize = 31;
pub const MAX_FRAGMENT_PAYLOAD: usize = 21;
pub const FRAGMENT_HEADER: usize = 10;
pub const DEFAULT_INTERVAL_MS: u64 = 250;

const TAG_DEVICE: u8 = 0x01;
const TAG_POSITION: u8 = 0x02;
const TAG_RANGE: u8 = 0x03;
const TAG_DATA_TYPE: u8 = 0x04;
const TAG_POLICY: u8 = 0x05;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BeaconError {
    #[error("policy TLV of {0} octets exceeds 255")]
    OversizePolicy(usize),
    #[error("policy: {0}")]
    Policy(#[from] TlvError),
    #[error("bad frame: {0}")]
    Frame(&'static str),
    #[error("fragments belong to different declarations")]
    MixedDeclarations,
    #[error("inconsistent fragment count")]
    InconsistentCount,
    #[error("fragment {0} received twice with different payloads")]
    ConflictingFragment(u8),
    #[error("declaration payload: {0}")]
    Payload(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AdvertisementFragment {
    pub declaration_id: u32,
    pub index: u8,
    pub count: u8,
    pub payload: Vec<u8>,
}

impl AdvertisementFragment {
    pub fn to_bytes(&self) -> Vec<u8> {
        debug_assert!(self.payload.len() <= MAX_FRAGMENT_PAYLOAD);
        let mut out = Vec::with_capacity(FRAGMENT_HEADER + self.payload.len());
        out.extend_from_slice(&ADV_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.declaration_id.to_be_bytes());
        out.push(self.index);
        out.push(self.count);
        out.push(self.payload.len() as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BeaconError> {
        if bytes.len() < FRAGMENT_HEADER || bytes.len() > MAX_FRAME {
            return Err(BeaconError::Frame("length"));
        }
        if bytes[0..2] != ADV_MAGIC {
            return Err(BeaconError::Frame("magic"));
        }
        if bytes[2] != VERSION {
            return Err(BeaconError::Frame("version"));
        }
        let declaration_id = u32::from_be_bytes(bytes[3..7].try_into().unwrap());
        let (index, count, len) = (bytes[7], bytes[8], bytes[9] as usize);
        if count == 0 || index >= count {
            return Err(BeaconError::Frame("fragment index"));
        }
        if len > MAX_FRAGMENT_PAYLOAD || bytes.len() != FRAGMENT_HEADER + len {
            return Err(BeaconError::Frame("payload length"));
        }
        Ok(AdvertisementFragment {
            declaration_id,
            index,
            count,
            payload: bytes[FRAGMENT_HEADER..].to_vec(),
        })
    }
}

fn push_tlv(out: &mut Vec<u8>, tag: u8, value: &[u8]) {
    out.push(tag);
    out.push(value.len() as u8);
    out.extend_from_slice(value);
}

/// Canonical declaration payload before fragmentation.
pub fn encode_declaration_payload(d: &Declaration) -> Result<Vec<u8>, BeaconError> {
    let policy = encode_policy(&d.profile.policy)?;
    if policy.len() > 255 {
        return Err(BeaconError::OversizePolicy(policy.len()));
    }
    let p = &d.profile;
    let mut position = Vec::with_capacity(8);
    position.extend_from_slice(&p.position.x_cm.to_be_bytes());
    position.extend_from_slice(&p.position.y_cm.to_be_bytes());

    let mut out = Vec::with_capacity(37 + policy.len());
    push_tlv(&mut out, TAG_DEVICE, &d.device_id.0);
    push_tlv(&mut out, TAG_POSITION, &position);
    push_tlv(&mut out, TAG_RANGE, &p.range.decimeters.to_be_bytes());
    push_tlv(&mut out, TAG_DATA_TYPE, &[p.data_type.code()]);
    push_tlv(&mut out, TAG_POLICY, &policy);
    Ok(out)
}

/// Content-derived version handle: the first four octets of SHA-256(payload).
pub fn declaration_id(payload: &[u8]) -> u32 {
    let digest = Sha256::digest(payload);
    u32::from_be_bytes(digest[..4].try_into().unwrap())
}

pub fn encode_declaration(d: &Declaration) -> Result<Vec<AdvertisementFragment>, BeaconError> {
    let payload = encode_declaration_payload(d)?;
    let id = declaration_id(&payload);
    let chunks: Vec<&[u8]> = payload.chunks(MAX_FRAGMENT_PAYLOAD).collect();
    let count = chunks.len() as u8;
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| AdvertisementFragment {
            declaration_id: id,
            index: i as u8,
            count,
            payload: chunk.to_vec(),
        })
        .collect())
}

fn take_tlv<'a>(rest: &mut &'a [u8], tag: u8) -> Result<&'a [u8], BeaconError> {
    let got = *rest.first().ok_or(BeaconError::Payload("truncated"))?;
    if got != tag {
        return Err(BeaconError::Payload("unexpected tag"));
    }
    let len = *rest.get(1).ok_or(BeaconError::Payload("truncated"))? as usize;
    let value = rest.get(2..2 + len).ok_or(BeaconError::Payload("truncated"))?;
    *rest = &rest[2 + len..];
    Ok(value)
}

pub fn decode_declaration_payload(payload: &[u8]) -> Result<Declaration, BeaconError> {
    let mut rest = payload;
    let device: [u8; 16] = take_tlv(&mut rest, TAG_DEVICE)?
        .try_into()
        .map_err(|_| BeaconError::Payload("device id length"))?;
    let position = take_tlv(&mut rest, TAG_POSITION)?;
    if position.len() != 8 {
        return Err(BeaconError::Payload("position length"));
    }
    let x = i32::from_be_bytes(position[0..4].try_into().unwrap());
    let y = i32::from_be_bytes(position[4..8].try_into().unwrap());
    let range: [u8; 2] = take_tlv(&mut rest, TAG_RANGE)?
        .try_into()
        .map_err(|_| BeaconError::Payload("range length"))?;
    let data_type = match take_tlv(&mut rest, TAG_DATA_TYPE)? {
        [code] => DataType::from_code(*code).ok_or(BeaconError::Payload("data type code"))?,
        _ => return Err(BeaconError::Payload("data type length")),
    };
    let policy = decode_policy(take_tlv(&mut rest, TAG_POLICY)?)?;
    if !rest.is_empty() {
        return Err(BeaconError::Payload("trailing octets"));
    }
    Ok(Declaration {
        device_id: DeviceId(device),
        profile: DeviceProfile {
            position: Position::from_cm(x, y),
            range: Range::from_decimeters(u16::from_be_bytes(range)),
            data_type,
            policy,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assembly {
    Complete(Declaration),
    NeedsMore { missing: usize },
}

/// Reassembles one declaration from any order of its fragments; duplicates
/// are fine as long as they agree.
pub fn decode_declaration(frags: &[AdvertisementFragment]) -> Result<Assembly, BeaconError> {
    let Some(first) = frags.first() else {
        return Ok(Assembly::NeedsMore { missing: 1 });
    };
    let mut parts: BTreeMap<u8, &[u8]> = BTreeMap::new();
    for f in frags {
        if f.declaration_id != first.declaration_id {
            return Err(BeaconError::MixedDeclarations);
        }
        if f.count != first.count || f.index >= f.count {
            return Err(BeaconError::InconsistentCount);
        }
        if let Some(seen) = parts.insert(f.index, &f.payload) {
            if seen != f.payload.as_slice() {
                return Err(BeaconError::ConflictingFragment(f.index));
            }
        }
    }
    let missing = first.count as usize - parts.len();
    if missing > 0 {
        return Ok(Assembly::NeedsMore { missing });
    }
    let payload: Vec<u8> = parts.values().flat_map(|p| p.iter().copied()).collect();
    decode_declaration_payload(&payload).map(Assembly::Complete)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum ConsentStatus {
    Accepted = 0x00,
    RejectedNoncompliant = 0x01,
    Malformed = 0x02,
}

impl ConsentStatus {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x00 => Some(ConsentStatus::Accepted),
            0x01 => Some(ConsentStatus::RejectedNoncompliant),
            0x02 => Some(ConsentStatus::Malformed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsentFrame {
    pub device_id: DeviceId,
    pub subject: SubjectDeviceId,
    pub timestamp: Timestamp,
    pub nonce: [u8; 8],
    pub policy: Policy,
}

impl ConsentFrame {
    pub fn to_bytes(&self) -> Result<Vec<u8>, BeaconError> {
        let value = self.subject.bytes();
        if value.is_empty() || value.len() > MAX_SUBJECT_VALUE {
            return Err(BeaconError::Frame("subject length"));
        }
        let policy = encode_policy(&self.policy)?;
        let mut out = Vec::with_capacity(39 + value.len() + policy.len());
        out.extend_from_slice(&CONSENT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.device_id.0);
        out.push(self.subject.kind.code());
        out.push(value.len() as u8);
        out.extend_from_slice(value);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&policy);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BeaconError> {
        let truncated = BeaconError::Frame("truncated");
        if bytes.len() < 21 {
            return Err(truncated);
        }
        if bytes[0..2] != CONSENT_MAGIC {
            return Err(BeaconError::Frame("magic"));
        }
        if bytes[2] != VERSION {
            return Err(BeaconError::Frame("version"));
        }
        let device_id = DeviceId(bytes[3..19].try_into().unwrap());
        let kind = DataType::from_code(bytes[19]).ok_or(BeaconError::Frame("subject kind"))?;
        let len = bytes[20] as usize;
        if len == 0 || len > MAX_SUBJECT_VALUE {
            return Err(BeaconError::Frame("subject length"));
        }
        let value = bytes.get(21..21 + len).ok_or(truncated.clone())?;
        let tail = &bytes[21 + len..];
        if tail.len() < 16 {
            return Err(truncated);
        }
        let timestamp = u64::from_be_bytes(tail[0..8].try_into().unwrap());
        let nonce: [u8; 8] = tail[8..16].try_into().unwrap();
        let policy = decode_policy(&tail[16..])?;
        Ok(ConsentFrame {
            device_id,
            subject: SubjectDeviceId::new(kind, value.to_vec()),
            timestamp,
            nonce,
            policy,
        })
    }
}

/// Controller-side proof that a subject consented under a policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentReceipt {
    pub device_id: DeviceId,
    pub subject: SubjectDeviceId,
    pub policy: Policy,
    pub timestamp: Timestamp,
    pub nonce: String,
    pub received_at: Timestamp,
}

pub type ScannerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub scanner: ScannerId,
    pub at: Timestamp,
}

/// In-memory broadcast medium. Frames reach every registered scanner whose
/// position is within the emitter's range at emission time.
pub struct RadioBus {
    scanners: Vec<Option<Position>>,
    inboxes: Vec<VecDeque<(Timestamp, Vec<u8>)>>,
    drop_probability: f64,
    rng: ChaCha8Rng,
    emissions: u64,
}

impl RadioBus {
    pub fn new() -> Self {
        Self::with_loss(0.0, 0)
    }

    pub fn with_loss(drop_probability: f64, seed: u64) -> Self {
        RadioBus {
            scanners: Vec::new(),
            inboxes: Vec::new(),
            drop_probability: drop_probability.clamp(0.0, 1.0),
            rng: ChaCha8Rng::seed_from_u64(seed),
            emissions: 0,
        }
    }

    pub fn add_scanner(&mut self, position: Option<Position>) -> ScannerId {
        self.scanners.push(position);
        self.inboxes.push(VecDeque::new());
        self.scanners.len() - 1
    }

    pub fn set_position(&mut self, scanner: ScannerId, position: Option<Position>) {
        self.scanners[scanner] = position;
    }

    pub fn position(&self, scanner: ScannerId) -> Option<Position> {
        self.scanners[scanner]
    }

    /// Number of frames ever put on the air.
    pub fn emissions(&self) -> u64 {
        self.emissions
    }

    pub fn broadcast(
        &mut self,
        at: Timestamp,
        origin: &Position,
        range: &Range,
        frame: &[u8],
    ) -> Vec<Delivery> {
        self.emissions += 1;
        let mut delivered = Vec::new();
        for (id, pos) in self.scanners.iter().enumerate() {
            let Some(pos) = pos else { continue };
            if !within(pos, origin, range) {
                continue;
            }
            if self.drop_probability > 0.0 && self.rng.random_bool(self.drop_probability) {
                continue;
            }
            self.inboxes[id].push_back((at, frame.to_vec()));
            delivered.push(Delivery { scanner: id, at });
        }
        delivered
    }

    pub fn take_inbox(&mut self, scanner: ScannerId) -> Vec<(Timestamp, Vec<u8>)> {
        self.inboxes[scanner].drain(..).collect()
    }
}

impl Default for RadioBus {
    fn default() -> Self {
        Self::new()
    }
}

/// Controller-side endpoint: advertises one declaration round-robin and
/// accepts consent writes.
pub struct BeaconEndpoint {
    declaration: Declaration,
    fragments: Vec<Vec<u8>>,
    interval_ms: u64,
    margin: Range,
    next_due: Timestamp,
    next_fragment: usize,
    receipts: Vec<ConsentReceipt>,
}

impl BeaconEndpoint {
    pub fn new(declaration: Declaration, start: Timestamp) -> Result<Self, BeaconError> {
        let fragments = encode_declaration(&declaration)?
            .iter()
            .map(AdvertisementFragment::to_bytes)
            .collect();
        Ok(BeaconEndpoint {
            declaration,
            fragments,
            interval_ms: DEFAULT_INTERVAL_MS,
            margin: Range::default(),
            next_due: start,
            next_fragment: 0,
            receipts: Vec::new(),
        })
    }

    pub fn with_interval(mut self, interval_ms: u64) -> Self {
        self.interval_ms = interval_ms.max(1);
        self
    }

    /// Extends the advertising range beyond the declared collection range.
    pub fn with_margin(mut self, margin: Range) -> Self {
        self.margin = margin;
        self
    }

    pub fn declaration(&self) -> &Declaration {
        &self.declaration
    }

    pub fn fragment_count(&self) -> usize {
        self.fragments.len()
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    pub fn next_due(&self) -> Timestamp {
        self.next_due
    }

    pub fn advertising_range(&self) -> Range {
        Range::from_decimeters(
            self.declaration
                .profile
                .range
                .decimeters
                .saturating_add(self.margin.decimeters),
        )
    }

    /// Emits every fragment due at or before `now`.
    pub fn tick(&mut self, now: Timestamp, bus: &mut RadioBus) -> Vec<Delivery> {
        let mut delivered = Vec::new();
        let range = self.advertising_range();
        while self.next_due <= now {
            let frame = &self.fragments[self.next_fragment];
            delivered.extend(bus.broadcast(
                self.next_due,
                &self.declaration.profile.position,
                &range,
                frame,
            ));
            self.next_fragment = (self.next_fragment + 1) % self.fragments.len();
            self.next_due += self.interval_ms;
        }
        delivered
    }

    /// Handles a consent write. `None` means the writer is out of range and
    /// gets no response at all.
    pub fn write_consent(
        &mut self,
        writer: &Position,
        frame: &[u8],
        now: Timestamp,
    ) -> Option<ConsentStatus> {
        if !within(writer, &self.declaration.profile.position, &self.advertising_range()) {
            return None;
        }
        let Ok(frame) = ConsentFrame::from_bytes(frame) else {
            return Some(ConsentStatus::Malformed);
        };
        if frame.device_id != self.declaration.device_id {
            return Some(ConsentStatus::Malformed);
        }
        if !self.declaration.profile.policy.implies(&frame.policy) {
            return Some(ConsentStatus::RejectedNoncompliant);
        }
        let nonce = hex::encode(frame.nonce);
        let duplicate = self
            .receipts
            .iter()
            .any(|r| r.nonce == nonce && r.subject == frame.subject && r.policy == frame.policy);
        if !duplicate {
            self.receipts.push(ConsentReceipt {
                device_id: frame.device_id,
                subject: frame.subject,
                policy: frame.policy,
                timestamp: frame.timestamp,
                nonce,
                received_at: now,
            });
        }
        Some(ConsentStatus::Accepted)
    }

    pub fn receipts(&self) -> &[ConsentReceipt] {
        &self.receipts
    }
}

/// Subject-side passive receiver. Never transmits.
#[derive(Default)]
pub struct Scanner {
    partial: HashMap<u32, Vec<AdvertisementFragment>>,
    complete: HashMap<u32, Declaration>,
    malformed: u64,
}

impl Scanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one received frame. Returns the declaration the first time its
    /// fragment set completes; later repeats of a cached id return nothing.
    pub fn receive(&mut self, frame: &[u8]) -> Option<Declaration> {
        let Ok(fragment) = AdvertisementFragment::from_bytes(frame) else {
            self.malformed += 1;
            return None;
        };
        if self.complete.contains_key(&fragment.declaration_id) {
            return None;
        }
        let id = fragment.declaration_id;
        let parts = self.partial.entry(id).or_default();
        if !parts.contains(&fragment) {
            parts.push(fragment);
        }
        match decode_declaration(parts) {
            Ok(Assembly::Complete(decl)) => {
                self.partial.remove(&id);
                self.complete.insert(id, decl.clone());
                Some(decl)
            }
            Ok(Assembly::NeedsMore { .. }) => None,
            Err(_) => {
                self.malformed += 1;
                self.partial.remove(&id);
                None
            }
        }
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }

    pub fn known(&self) -> impl Iterator<Item = &Declaration> {
        self.complete.values()
    }
}
