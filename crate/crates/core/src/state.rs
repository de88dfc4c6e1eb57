//! Abstract system state and the geometric `within` relation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::policy::{MaybePolicy, Policy};

/// Milliseconds on the (virtual or wall) clock.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("label longer than 16 octets")]
    LabelTooLong,
    #[error("invalid hex identifier: {0}")]
    BadHex(String),
    #[error("identifier must be {expected} octets, got {got}")]
    BadLength { expected: usize, got: usize },
}

/// Planar position with centimeter resolution. Serialized as meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Position {
    pub x_cm: i32,
    pub y_cm: i32,
}

impl Position {
    pub const fn from_cm(x_cm: i32, y_cm: i32) -> Self {
        Position { x_cm, y_cm }
    }

    pub fn from_meters(x: f64, y: f64) -> Self {
        Position {
            x_cm: (x * 100.0).round() as i32,
            y_cm: (y * 100.0).round() as i32,
        }
    }

    pub fn x_meters(&self) -> f64 {
        f64::from(self.x_cm) / 100.0
    }

    pub fn y_meters(&self) -> f64 {
        f64::from(self.y_cm) / 100.0
    }

    /// Squared euclidean distance in cm².
    pub fn distance_sq_cm(&self, other: &Position) -> i128 {
        let dx = i128::from(self.x_cm) - i128::from(other.x_cm);
        let dy = i128::from(self.y_cm) - i128::from(other.y_cm);
        dx * dx + dy * dy
    }

    pub fn offset(&self, dx_cm: i32, dy_cm: i32) -> Position {
        Position {
            x_cm: self.x_cm.saturating_add(dx_cm),
            y_cm: self.y_cm.saturating_add(dy_cm),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetersXY {
    x: f64,
    y: f64,
}

impl Serialize for Position {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MetersXY {
            x: self.x_meters(),
            y: self.y_meters(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = MetersXY::deserialize(d)?;
        if !(m.x.is_finite() && m.y.is_finite()) {
            return Err(serde::de::Error::custom("position must be finite"));
        }
        let limit = f64::from(i32::MAX) / 100.0;
        if m.x.abs() > limit || m.y.abs() > limit {
            return Err(serde::de::Error::custom("position out of range"));
        }
        Ok(Position::from_meters(m.x, m.y))
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.2} m, {:.2} m)", self.x_meters(), self.y_meters())
    }
}

/// Collection or communication range with decimeter resolution. Serialized as meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Range {
    pub decimeters: u16,
}

impl Range {
    pub const fn from_decimeters(decimeters: u16) -> Self {
        Range { decimeters }
    }

    /// Rounds to the nearest decimeter, saturating at the 16-bit maximum.
    pub fn from_meters(m: f64) -> Self {
        let dm = (m * 10.0).round().clamp(0.0, f64::from(u16::MAX));
        Range {
            decimeters: dm as u16,
        }
    }

    pub fn meters(&self) -> f64 {
        f64::from(self.decimeters) / 10.0
    }

    pub fn centimeters(&self) -> i128 {
        i128::from(self.decimeters) * 10
    }
}

impl Serialize for Range {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.meters())
    }
}

impl<'de> Deserialize<'de> for Range {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = f64::deserialize(d)?;
        if !m.is_finite() || m < 0.0 || m * 10.0 > f64::from(u16::MAX) {
            return Err(serde::de::Error::custom("range must be within 0..=6553.5 m"));
        }
        Ok(Range::from_meters(m))
    }
}

/// True iff `pos` lies in the closed disc of radius `range` around `center`.
pub fn within(pos: &Position, center: &Position, range: &Range) -> bool {
    let r = range.centimeters();
    pos.distance_sq_cm(center) <= r * r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataType {
    MacAddress = 0x01,
    PlateNumber = 0x02,
    Image = 0x03,
    Sound = 0x04,
    Presence = 0x05,
}

impl DataType {
    pub const ALL: &'static [DataType] = &[
        DataType::MacAddress,
        DataType::PlateNumber,
        DataType::Image,
        DataType::Sound,
        DataType::Presence,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        DataType::ALL.iter().copied().find(|t| t.code() == code)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DataType::MacAddress => "MAC address",
            DataType::PlateNumber => "plate number",
            DataType::Image => "image",
            DataType::Sound => "sound",
            DataType::Presence => "presence",
        }
    }
}

macro_rules! hex_serde {
    ($ty:ty, $get:expr, $make:expr) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                #[allow(clippy::redundant_closure_call)]
                s.serialize_str(&hex::encode(($get)(self)))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
                #[allow(clippy::redundant_closure_call)]
                ($make)(bytes).map_err(serde::de::Error::custom)
            }
        }
    };
}

/// Identifier of a collecting (controller-side) device.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub [u8; 16]);

impl DeviceId {
    /// Builds an id from a short ASCII label, zero padded.
    pub fn from_label(label: &str) -> Result<Self, IdError> {
        let bytes = label.as_bytes();
        if bytes.len() > 16 {
            return Err(IdError::LabelTooLong);
        }
        let mut id = [0u8; 16];
        id[..bytes.len()].copy_from_slice(bytes);
        Ok(DeviceId(id))
    }

    pub fn parse_hex(text: &str) -> Result<Self, IdError> {
        let bytes = hex::decode(text).map_err(|e| IdError::BadHex(e.to_string()))?;
        Self::from_vec(bytes)
    }

    fn from_vec(bytes: Vec<u8>) -> Result<Self, IdError> {
        let got = bytes.len();
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| IdError::BadLength { expected: 16, got })?;
        Ok(DeviceId(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Accepts either 32 hex digits or a short label.
    pub fn parse(text: &str) -> Result<Self, IdError> {
        if text.len() == 32 && text.bytes().all(|b| b.is_ascii_hexdigit()) {
            Self::parse_hex(text)
        } else {
            Self::from_label(text)
        }
    }

    /// The label part of a padded id, if it is printable ASCII.
    pub fn label(&self) -> Option<&str> {
        let end = self.0.iter().position(|&b| b == 0).unwrap_or(16);
        if self.0[end..].iter().any(|&b| b != 0) {
            return None;
        }
        std::str::from_utf8(&self.0[..end])
            .ok()
            .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_graphic()))
    }
}

hex_serde!(DeviceId, |d: &DeviceId| d.0, DeviceId::from_vec);

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label() {
            Some(label) => write!(f, "DeviceId({label})"),
            None => write!(f, "DeviceId({})", self.to_hex()),
        }
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label() {
            Some(label) => f.write_str(label),
            None => f.write_str(&self.to_hex()),
        }
    }
}

/// Maximum length of a subject device identifier value in octets.
pub const MAX_SUBJECT_VALUE: usize = 32;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubjectValue(pub Vec<u8>);

hex_serde!(SubjectValue, |v: &SubjectValue| v.0.clone(), |b| Ok::<_, IdError>(
    SubjectValue(b)
));

/// Identifier of a data-subject device (MAC address, plate number, ...).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectDeviceId {
    pub kind: DataType,
    pub value: SubjectValue,
}

impl SubjectDeviceId {
    pub fn new(kind: DataType, value: impl Into<Vec<u8>>) -> Self {
        SubjectDeviceId {
            kind,
            value: SubjectValue(value.into()),
        }
    }

    pub fn mac(octets: [u8; 6]) -> Self {
        Self::new(DataType::MacAddress, octets.to_vec())
    }

    pub fn plate(text: &str) -> Self {
        Self::new(DataType::PlateNumber, text.as_bytes().to_vec())
    }

    pub fn bytes(&self) -> &[u8] {
        &self.value.0
    }

    pub fn is_well_formed(&self) -> bool {
        !self.value.0.is_empty() && self.value.0.len() <= MAX_SUBJECT_VALUE
    }
}

impl fmt::Debug for SubjectDeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for SubjectDeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bytes = self.bytes();
        match self.kind {
            DataType::MacAddress if bytes.len() == 6 => {
                let parts: Vec<String> = bytes.iter().map(|b| format!("{b:02x}")).collect();
                write!(f, "mac:{}", parts.join(":"))
            }
            _ => match std::str::from_utf8(bytes) {
                Ok(text) if text.bytes().all(|b| b.is_ascii_graphic() || b == b' ') => {
                    write!(f, "{:?}:{text}", self.kind)
                }
                _ => write!(f, "{:?}:{}", self.kind, hex::encode(bytes)),
            },
        }
    }
}

/// Maximum length of a collected data value in octets.
pub const MAX_DATA_VALUE: usize = 256;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DataValue(pub Vec<u8>);

hex_serde!(DataValue, |v: &DataValue| v.0.clone(), |b| Ok::<_, IdError>(
    DataValue(b)
));

impl fmt::Debug for DataValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(text) if text.bytes().all(|b| b.is_ascii_graphic()) && !text.is_empty() => {
                write!(f, "DataValue({text:?})")
            }
            _ => write!(f, "DataValue({})", hex::encode(&self.0)),
        }
    }
}

impl DataValue {
    /// Whether the value has the shape its data type demands.
    pub fn fits(&self, data_type: DataType) -> bool {
        match data_type {
            DataType::MacAddress => self.0.len() == 6,
            DataType::PlateNumber => {
                !self.0.is_empty()
                    && self.0.len() <= MAX_SUBJECT_VALUE
                    && std::str::from_utf8(&self.0).is_ok()
            }
            _ => self.0.len() <= MAX_DATA_VALUE,
        }
    }
}

pub type MaybeValue = Option<DataValue>;

/// The `(position, range, data type, policy)` tuple shared by `Config`,
/// `Declared_c` and `Knows_s`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub position: Position,
    pub range: Range,
    pub data_type: DataType,
    pub policy: Policy,
}

/// Parameters of a `declare` operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Declaration {
    pub device_id: DeviceId,
    #[serde(flatten)]
    pub profile: DeviceProfile,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CollectedKey {
    pub device: DeviceId,
    pub subject: SubjectDeviceId,
    pub data_type: DataType,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectKey {
    pub subject: SubjectDeviceId,
    pub data_type: DataType,
}

/// A `(policy, value)` pair in either store; both halves may be ⊥.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Stored {
    pub policy: MaybePolicy,
    pub value: MaybeValue,
}

impl Stored {
    pub const UNDEFINED: Stored = Stored {
        policy: None,
        value: None,
    };

    pub fn new(policy: MaybePolicy, value: MaybeValue) -> Self {
        Stored { policy, value }
    }

    pub fn is_undefined(&self) -> bool {
        self.policy.is_none() && self.value.is_none()
    }
}

mod entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K, V, S>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error>
    where
        K: Serialize,
        V: Serialize,
        S: Serializer,
    {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        let pairs: Vec<(K, V)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

/// The seven state functions as finite maps. Absent keys read as ⊥; `paired`
/// defaults to the identity. Writes normalize so that an entry equal to its
/// default is never stored, which keeps structural equality semantic.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SystemState {
    #[serde(with = "entries")]
    pub config: BTreeMap<DeviceId, DeviceProfile>,
    #[serde(with = "entries")]
    pub declared: BTreeMap<DeviceId, DeviceProfile>,
    #[serde(with = "entries")]
    pub knows: BTreeMap<(SubjectDeviceId, DeviceId), DeviceProfile>,
    #[serde(with = "entries")]
    pub position: BTreeMap<SubjectDeviceId, Position>,
    #[serde(with = "entries")]
    pub paired: BTreeMap<SubjectDeviceId, SubjectDeviceId>,
    #[serde(with = "entries")]
    pub store_c: BTreeMap<CollectedKey, Stored>,
    #[serde(with = "entries")]
    pub store_s: BTreeMap<SubjectKey, Stored>,
    /// Time of the last applied collect per `store_c` entry. Lives beside the
    /// abstract state and is maintained by the engine, not by `apply`.
    #[serde(with = "entries", default)]
    pub collected_at: BTreeMap<CollectedKey, Timestamp>,
}

impl SystemState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store_c(&self, key: &CollectedKey) -> Stored {
        self.store_c.get(key).cloned().unwrap_or_default()
    }

    pub fn store_s(&self, subject: &SubjectDeviceId, data_type: DataType) -> Stored {
        self.store_s
            .get(&SubjectKey {
                subject: subject.clone(),
                data_type,
            })
            .cloned()
            .unwrap_or_default()
    }

    pub fn paired(&self, subject: &SubjectDeviceId) -> SubjectDeviceId {
        self.paired
            .get(subject)
            .cloned()
            .unwrap_or_else(|| subject.clone())
    }

    pub fn knows(&self, subject: &SubjectDeviceId, device: &DeviceId) -> Option<&DeviceProfile> {
        self.knows.get(&(subject.clone(), *device))
    }

    pub fn set_store_c(&mut self, key: CollectedKey, entry: Stored) {
        if entry.is_undefined() {
            self.store_c.remove(&key);
        } else {
            self.store_c.insert(key, entry);
        }
    }

    pub fn set_store_s(&mut self, key: SubjectKey, entry: Stored) {
        if entry.is_undefined() {
            self.store_s.remove(&key);
        } else {
            self.store_s.insert(key, entry);
        }
    }

    pub fn set_paired(&mut self, from: SubjectDeviceId, to: SubjectDeviceId) {
        if from == to {
            self.paired.remove(&from);
        } else {
            self.paired.insert(from, to);
        }
    }

    /// The state without the engine-maintained side data.
    pub fn abstract_view(&self) -> SystemState {
        SystemState {
            collected_at: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Positioned subject devices inside the closed disc `(center, range)`.
pub fn subjects_in_range(
    st: &SystemState,
    center: &Position,
    range: &Range,
) -> BTreeSet<SubjectDeviceId> {
    st.position
        .iter()
        .filter(|(_, pos)| within(pos, center, range))
        .map(|(subject, _)| subject.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ControllerCategory, Purpose, Recipient};
    use proptest::prelude::*;

    fn m(x: f64, y: f64) -> Position {
        Position::from_meters(x, y)
    }

    #[test]
    fn within_examples() {
        let p = m(1.5, -2.0);
        assert!(within(&p, &p, &Range::from_decimeters(0)));
        assert!(within(&m(3.0, 4.0), &m(0.0, 0.0), &Range::from_meters(5.0)));
        assert!(!within(&m(3.0, 4.0), &m(0.0, 0.0), &Range::from_meters(4.9)));
    }

    #[test]
    fn within_handles_extreme_coordinates() {
        let a = Position::from_cm(i32::MIN, i32::MIN);
        let b = Position::from_cm(i32::MAX, i32::MAX);
        assert!(!within(&a, &b, &Range::from_decimeters(u16::MAX)));
    }

    #[test]
    fn subjects_in_range_examples() {
        let st = SystemState::new();
        assert!(subjects_in_range(&st, &m(0.0, 0.0), &Range::from_meters(10.0)).is_empty());

        let mut st = SystemState::new();
        let edge = SubjectDeviceId::mac([2, 0, 0, 0, 0, 1]);
        let far = SubjectDeviceId::mac([2, 0, 0, 0, 0, 2]);
        let unplaced = SubjectDeviceId::mac([2, 0, 0, 0, 0, 3]);
        st.position.insert(edge.clone(), m(6.0, 8.0));
        st.position.insert(far, m(6.0, 8.1));
        st.store_s.insert(
            SubjectKey {
                subject: unplaced,
                data_type: DataType::MacAddress,
            },
            Stored::default(),
        );
        let found = subjects_in_range(&st, &m(0.0, 0.0), &Range::from_meters(10.0));
        assert_eq!(found.into_iter().collect::<Vec<_>>(), vec![edge]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut st = SystemState::new();
        let dev = DeviceId::from_label("cam-1").unwrap();
        let profile = DeviceProfile {
            position: m(12.34, -5.0),
            range: Range::from_meters(15.5),
            data_type: DataType::PlateNumber,
            policy: Policy {
                controller_id: "road-co".into(),
                controller_category: ControllerCategory::RoadOperator,
                purposes: [Purpose::Billing].into_iter().collect(),
                retention: 3600,
                recipients: [Recipient::ControllerOnly].into_iter().collect(),
                cross_border: false,
            },
        };
        st.declared.insert(dev, profile.clone());
        st.config.insert(dev, profile.clone());
        let plate = SubjectDeviceId::plate("AB-123-CD");
        st.knows.insert((plate.clone(), dev), profile);
        st.position.insert(plate.clone(), m(1.0, 1.0));
        st.set_store_c(
            CollectedKey {
                device: dev,
                subject: plate.clone(),
                data_type: DataType::PlateNumber,
            },
            Stored::new(None, Some(DataValue(b"AB-123-CD".to_vec()))),
        );
        let json = st.to_json().unwrap();
        assert!(json.contains("\"store_s\""));
        assert_eq!(SystemState::from_json(&json).unwrap(), st);
    }

    #[test]
    fn device_id_labels() {
        let id = DeviceId::from_label("anpr-cam-01").unwrap();
        assert_eq!(id.to_string(), "anpr-cam-01");
        assert_eq!(DeviceId::parse_hex(&id.to_hex()).unwrap(), id);
        assert!(DeviceId::from_label("seventeen-chars!!").is_err());
        assert!(DeviceId::parse_hex("abcd").is_err());
    }

    #[test]
    fn value_shapes() {
        assert!(DataValue(vec![1, 2, 3, 4, 5, 6]).fits(DataType::MacAddress));
        assert!(!DataValue(vec![1, 2, 3]).fits(DataType::MacAddress));
        assert!(DataValue(b"AB-123".to_vec()).fits(DataType::PlateNumber));
        assert!(!DataValue(vec![0xff, 0xfe]).fits(DataType::PlateNumber));
        assert!(!DataValue(vec![0; 257]).fits(DataType::Image));
    }

    proptest! {
        #[test]
        fn within_is_translation_invariant(
            ax in -1_000_000i32..1_000_000, ay in -1_000_000i32..1_000_000,
            bx in -1_000_000i32..1_000_000, by in -1_000_000i32..1_000_000,
            tx in -1_000_000i32..1_000_000, ty in -1_000_000i32..1_000_000,
            r in 0u16..u16::MAX,
        ) {
            let a = Position::from_cm(ax, ay);
            let b = Position::from_cm(bx, by);
            let range = Range::from_decimeters(r);
            prop_assert_eq!(
                within(&a, &b, &range),
                within(&a.offset(tx, ty), &b.offset(tx, ty), &range)
            );
        }

        #[test]
        fn subjects_in_range_matches_scan(
            points in proptest::collection::vec((-3000i32..3000, -3000i32..3000), 0..40),
            cx in -3000i32..3000, cy in -3000i32..3000, r in 0u16..400,
        ) {
            let mut st = SystemState::new();
            for (i, (x, y)) in points.iter().enumerate() {
                st.position.insert(SubjectDeviceId::mac([0, 0, 0, 0, 0, i as u8]), Position::from_cm(*x, *y));
            }
            let center = Position::from_cm(cx, cy);
            let radius_cm = f64::from(r) * 10.0;
            let expected: BTreeSet<_> = points.iter().enumerate()
                .filter(|(_, (x, y))| {
                    let dx = f64::from(*x - cx);
                    let dy = f64::from(*y - cy);
                    dx * dx + dy * dy <= radius_cm * radius_cm
                })
                .map(|(i, _)| SubjectDeviceId::mac([0, 0, 0, 0, 0, i as u8]))
                .collect();
            prop_assert_eq!(subjects_in_range(&st, &center, &Range::from_decimeters(r)), expected);
        }
    }
}
