//! Privacy policies, the implication order between them and their wire form.
//!
//! A [`Policy`] is either a concrete commitment published by a data controller
//! or a bound demanded by a data subject. Both live in one type so that a
//! controller policy can be compared against a subject policy with
//! [`Policy::implies`]: `a.implies(&b)` holds when `a` is at least as
//! restrictive as `b` on every field.
//!
//! The binary form is a flat TLV stream (1-octet tag, 1-octet length):
//!
//! | tag  | field               | value                              |
//! |------|---------------------|------------------------------------|
//! | 0x10 | controller_id       | UTF-8, omitted when empty          |
//! | 0x11 | controller_category | 1 octet                            |
//! | 0x12 | purposes            | 1 octet per code, ascending        |
//! | 0x13 | retention           | u32 big-endian seconds             |
//! | 0x14 | recipients          | 1 octet per code, ascending        |
//! | 0x15 | cross_border        | 0x00 / 0x01                        |
//!
//! Encoding is canonical. Decoding is strict and rejects anything `encode`
//! would not produce, except tags with the high bit set, which are treated as
//! non-critical extensions and skipped.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TAG_CONTROLLER_ID: u8 = 0x10;
pub const TAG_CONTROLLER_CATEGORY: u8 = 0x11;
pub const TAG_PURPOSES: u8 = 0x12;
pub const TAG_RETENTION: u8 = 0x13;
pub const TAG_RECIPIENTS: u8 = 0x14;
pub const TAG_CROSS_BORDER: u8 = 0x15;

/// Maximum length of a controller identifier in octets.
pub const MAX_CONTROLLER_ID: usize = 32;

const NON_CRITICAL: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TlvError {
    #[error("empty policy stream")]
    Empty,
    #[error("stream truncated inside tag {0:#04x}")]
    Truncated(u8),
    #[error("unknown critical tag {0:#04x}")]
    UnknownTag(u8),
    #[error("tag {0:#04x} repeated or out of canonical order")]
    OutOfOrder(u8),
    #[error("mandatory tag {0:#04x} missing")]
    MissingTag(u8),
    #[error("tag {tag:#04x} has invalid length {len}")]
    BadLength { tag: u8, len: usize },
    #[error("tag {tag:#04x} carries unknown code {code:#04x}")]
    BadCode { tag: u8, code: u8 },
    #[error("set under tag {0:#04x} is not strictly ascending")]
    Unsorted(u8),
    #[error("controller id is not valid UTF-8")]
    InvalidUtf8,
    #[error("controller id longer than {MAX_CONTROLLER_ID} octets")]
    ControllerIdTooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("cannot compare an undefined policy")]
    Undefined,
    #[error("malformed policy TLV: {0}")]
    Malformed(#[from] TlvError),
}

macro_rules! code_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident = $code:literal => $display:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "SCREAMING_SNAKE_CASE")]
        pub enum $name {
            $($variant = $code),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some($name::$variant),)+
                    _ => None,
                }
            }

            /// Human-readable name used by [`render_policy`].
            pub fn display_name(self) -> &'static str {
                match self {
                    $($name::$variant => $display),+
                }
            }
        }
    };
}

code_enum! {
    /// Category of the data controller. `Other` on a bound acts as a wildcard.
    ControllerCategory {
        Other = 0x00 => "other",
        Museum = 0x01 => "museum",
        Retail = 0x02 => "retail",
        RoadOperator = 0x03 => "road operator",
        Employer = 0x04 => "employer",
    }
}

code_enum! {
    Purpose {
        CountingVisitors = 0x01 => "counting visitors",
        Billing = 0x02 => "billing",
        Profiling = 0x03 => "profiling",
        Security = 0x04 => "security",
        Analytics = 0x05 => "analytics",
    }
}

code_enum! {
    Recipient {
        ControllerOnly = 0x01 => "the controller only",
        Partners = 0x02 => "partners",
        Public = 0x03 => "the public",
    }
}

/// A privacy policy or policy bound. Retention is in seconds; zero means the
/// data must be deleted immediately.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Policy {
    #[serde(default)]
    pub controller_id: String,
    pub controller_category: ControllerCategory,
    pub purposes: BTreeSet<Purpose>,
    pub retention: u32,
    pub recipients: BTreeSet<Recipient>,
    #[serde(default)]
    pub cross_border: bool,
}

/// A policy that may be undefined (`None` plays the role of ⊥).
pub type MaybePolicy = Option<Policy>;

impl Policy {
    /// `self ≻ other`: `self` is at least as restrictive as `other` on every
    /// field. An empty `controller_id` or an `Other` category on `other`
    /// accepts any controller.
    pub fn implies(&self, other: &Policy) -> bool {
        self.purposes.is_subset(&other.purposes)
            && self.retention <= other.retention
            && self.recipients.is_subset(&other.recipients)
            && (!self.cross_border || other.cross_border)
            && (other.controller_category == ControllerCategory::Other
                || other.controller_category == self.controller_category)
            && (other.controller_id.is_empty() || other.controller_id == self.controller_id)
    }

    /// Same policy with a zero retention delay, i.e. a deletion request.
    pub fn with_zero_retention(&self) -> Policy {
        Policy {
            retention: 0,
            ..self.clone()
        }
    }
}

/// Implication over possibly-undefined policies; ⊥ on either side is an error.
pub fn implies_defined(a: Option<&Policy>, b: Option<&Policy>) -> Result<bool, PolicyError> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(a.implies(b)),
        _ => Err(PolicyError::Undefined),
    }
}

/// The left-biased override `a ▷ b`: `a` when defined, otherwise `b`.
pub fn prefer<T: Clone>(a: &Option<T>, b: &Option<T>) -> Option<T> {
    a.as_ref().or(b.as_ref()).cloned()
}

fn push_tlv(out: &mut Vec<u8>, tag: u8, value: &[u8]) {
    debug_assert!(value.len() <= u8::MAX as usize);
    out.push(tag);
    out.push(value.len() as u8);
    out.extend_from_slice(value);
}

pub fn encode_policy(p: &Policy) -> Result<Vec<u8>, TlvError> {
    if p.controller_id.len() > MAX_CONTROLLER_ID {
        return Err(TlvError::ControllerIdTooLong);
    }
    let mut out = Vec::with_capacity(encoded_len(p));
    if !p.controller_id.is_empty() {
        push_tlv(&mut out, TAG_CONTROLLER_ID, p.controller_id.as_bytes());
    }
    push_tlv(&mut out, TAG_CONTROLLER_CATEGORY, &[p.controller_category.code()]);
    let purposes: Vec<u8> = p.purposes.iter().map(|c| c.code()).collect();
    push_tlv(&mut out, TAG_PURPOSES, &purposes);
    push_tlv(&mut out, TAG_RETENTION, &p.retention.to_be_bytes());
    let recipients: Vec<u8> = p.recipients.iter().map(|c| c.code()).collect();
    push_tlv(&mut out, TAG_RECIPIENTS, &recipients);
    push_tlv(&mut out, TAG_CROSS_BORDER, &[p.cross_border as u8]);
    Ok(out)
}

/// Length of the canonical encoding of `p`.
pub fn encoded_len(p: &Policy) -> usize {
    let id = if p.controller_id.is_empty() {
        0
    } else {
        2 + p.controller_id.len()
    };
    id + 3 + (2 + p.purposes.len()) + 6 + (2 + p.recipients.len()) + 3
}

fn decode_set<T: Ord>(
    tag: u8,
    value: &[u8],
    from_code: impl Fn(u8) -> Option<T>,
) -> Result<BTreeSet<T>, TlvError> {
    if value.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TlvError::Unsorted(tag));
    }
    value
        .iter()
        .map(|&code| from_code(code).ok_or(TlvError::BadCode { tag, code }))
        .collect()
}

fn single_octet(tag: u8, value: &[u8]) -> Result<u8, TlvError> {
    match value {
        [b] => Ok(*b),
        _ => Err(TlvError::BadLength {
            tag,
            len: value.len(),
        }),
    }
}

pub fn decode_policy(bytes: &[u8]) -> Result<Policy, TlvError> {
    if bytes.is_empty() {
        return Err(TlvError::Empty);
    }
    let mut controller_id = None;
    let mut category = None;
    let mut purposes = None;
    let mut retention = None;
    let mut recipients = None;
    let mut cross_border = None;

    let mut last_tag = 0u8;
    let mut rest = bytes;
    while !rest.is_empty() {
        let tag = rest[0];
        let len = *rest.get(1).ok_or(TlvError::Truncated(tag))? as usize;
        let value = rest.get(2..2 + len).ok_or(TlvError::Truncated(tag))?;
        rest = &rest[2 + len..];

        if tag & NON_CRITICAL != 0 {
            continue;
        }
        if tag <= last_tag {
            return Err(TlvError::OutOfOrder(tag));
        }
        last_tag = tag;
        match tag {
            TAG_CONTROLLER_ID => {
                if value.is_empty() {
                    // an empty id is encoded by omission
                    return Err(TlvError::BadLength { tag, len: 0 });
                }
                if value.len() > MAX_CONTROLLER_ID {
                    return Err(TlvError::ControllerIdTooLong);
                }
                let id = std::str::from_utf8(value).map_err(|_| TlvError::InvalidUtf8)?;
                controller_id = Some(id.to_owned());
            }
            TAG_CONTROLLER_CATEGORY => {
                let code = single_octet(tag, value)?;
                category =
                    Some(ControllerCategory::from_code(code).ok_or(TlvError::BadCode { tag, code })?);
            }
            TAG_PURPOSES => purposes = Some(decode_set(tag, value, Purpose::from_code)?),
            TAG_RETENTION => {
                let raw: [u8; 4] = value
                    .try_into()
                    .map_err(|_| TlvError::BadLength { tag, len })?;
                retention = Some(u32::from_be_bytes(raw));
            }
            TAG_RECIPIENTS => recipients = Some(decode_set(tag, value, Recipient::from_code)?),
            TAG_CROSS_BORDER => {
                cross_border = Some(match single_octet(tag, value)? {
                    0x00 => false,
                    0x01 => true,
                    code => return Err(TlvError::BadCode { tag, code }),
                })
            }
            other => return Err(TlvError::UnknownTag(other)),
        }
    }

    Ok(Policy {
        controller_id: controller_id.unwrap_or_default(),
        controller_category: category.ok_or(TlvError::MissingTag(TAG_CONTROLLER_CATEGORY))?,
        purposes: purposes.ok_or(TlvError::MissingTag(TAG_PURPOSES))?,
        retention: retention.ok_or(TlvError::MissingTag(TAG_RETENTION))?,
        recipients: recipients.ok_or(TlvError::MissingTag(TAG_RECIPIENTS))?,
        cross_border: cross_border.ok_or(TlvError::MissingTag(TAG_CROSS_BORDER))?,
    })
}

fn join_names<'a>(names: impl Iterator<Item = &'a str>) -> String {
    let names: Vec<&str> = names.collect();
    match names.as_slice() {
        [] => "nothing".to_owned(),
        [one] => (*one).to_owned(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

fn render_duration(secs: u32) -> String {
    const UNITS: [(u32, &str); 4] = [(86_400, "day"), (3_600, "hour"), (60, "minute"), (1, "second")];
    let (size, unit) = UNITS
        .iter()
        .copied()
        .find(|(size, _)| secs.is_multiple_of(*size))
        .unwrap_or((1, "second"));
    let n = secs / size;
    if n == 1 {
        format!("1 {unit}")
    } else {
        format!("{n} {unit}s")
    }
}

/// Natural-language rendering, one sentence per field, in a fixed order.
pub fn render_policy(p: &Policy) -> String {
    let controller = if p.controller_id.is_empty() {
        "The data controller is not specified.".to_owned()
    } else {
        format!("The data controller is {}.", p.controller_id)
    };
    let category = if p.controller_category == ControllerCategory::Other {
        "The controller may belong to any category.".to_owned()
    } else {
        format!(
            "The controller is in the {} category.",
            p.controller_category.display_name()
        )
    };
    let purposes = format!(
        "Data is used only for {}.",
        join_names(p.purposes.iter().map(|c| c.display_name()))
    );
    let retention = if p.retention == 0 {
        "Data is deleted immediately after collection.".to_owned()
    } else {
        format!("Data is kept for at most {}.", render_duration(p.retention))
    };
    let recipients = format!(
        "Data is shared with {}.",
        join_names(p.recipients.iter().map(|c| c.display_name()))
    );
    let cross_border = if p.cross_border {
        "Data may be transferred outside the jurisdiction."
    } else {
        "Data stays within the jurisdiction."
    };
    [
        controller.as_str(),
        category.as_str(),
        purposes.as_str(),
        retention.as_str(),
        recipients.as_str(),
        cross_border,
    ]
    .join(" ")
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_policy(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: u32 = 86_400;

    fn policy(purposes: &[Purpose], retention: u32, recipients: &[Recipient]) -> Policy {
        Policy {
            controller_id: String::new(),
            controller_category: ControllerCategory::Other,
            purposes: purposes.iter().copied().collect(),
            retention,
            recipients: recipients.iter().copied().collect(),
            cross_border: false,
        }
    }

    #[test]
    fn implication_examples() {
        let p1 = policy(&[Purpose::CountingVisitors], 30 * DAY, &[Recipient::ControllerOnly]);
        let p2 = policy(
            &[Purpose::CountingVisitors, Purpose::Analytics],
            90 * DAY,
            &[Recipient::ControllerOnly, Recipient::Partners],
        );
        assert!(p1.implies(&p1));
        assert!(p1.implies(&p2));
        assert!(!p2.implies(&p1));
    }

    #[test]
    fn implication_controller_constraints() {
        let mut dc = policy(&[Purpose::Billing], DAY, &[Recipient::ControllerOnly]);
        dc.controller_id = "parking-lyon".into();
        dc.controller_category = ControllerCategory::RoadOperator;
        let mut bound = policy(&[Purpose::Billing], DAY, &[Recipient::ControllerOnly]);
        assert!(dc.implies(&bound));
        bound.controller_category = ControllerCategory::Museum;
        assert!(!dc.implies(&bound));
        bound.controller_category = ControllerCategory::RoadOperator;
        bound.controller_id = "someone-else".into();
        assert!(!dc.implies(&bound));
        bound.controller_id = "parking-lyon".into();
        assert!(dc.implies(&bound));
        dc.cross_border = true;
        assert!(!dc.implies(&bound));
    }

    #[test]
    fn undefined_operand_is_an_error() {
        let p = policy(&[Purpose::Billing], 1, &[]);
        assert_eq!(implies_defined(None, Some(&p)), Err(PolicyError::Undefined));
        assert_eq!(implies_defined(Some(&p), None), Err(PolicyError::Undefined));
        assert_eq!(implies_defined(Some(&p), Some(&p)), Ok(true));
    }

    #[test]
    fn override_examples() {
        let p = Some(policy(&[Purpose::Billing], 1, &[]));
        let q = Some(policy(&[Purpose::Security], 2, &[]));
        assert_eq!(prefer(&None, &p), p);
        assert_eq!(prefer(&p, &q), p);
        assert_eq!(prefer::<Policy>(&None, &None), None);
    }

    #[test]
    fn encoded_length_matches_layout() {
        // 0x10: 2+20, 0x11: 3, 0x12: 2+1, 0x13: 6, 0x14: 2+1, 0x15: 3
        let mut p = policy(&[Purpose::CountingVisitors], 30 * DAY, &[Recipient::ControllerOnly]);
        p.controller_id = "a".repeat(20);
        let bytes = encode_policy(&p).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(encoded_len(&p), 40);
        p.controller_id.clear();
        assert_eq!(encode_policy(&p).unwrap().len(), 18);
    }

    #[test]
    fn golden_policy_bytes() {
        let p = Policy {
            controller_id: "MUSE".into(),
            controller_category: ControllerCategory::Museum,
            purposes: [Purpose::Analytics, Purpose::CountingVisitors].into_iter().collect(),
            retention: 2_592_000,
            recipients: [Recipient::ControllerOnly].into_iter().collect(),
            cross_border: false,
        };
        let expected: &[u8] = &[
            0x10, 0x04, b'M', b'U', b'S', b'E', //
            0x11, 0x01, 0x01, //
            0x12, 0x02, 0x01, 0x05, //
            0x13, 0x04, 0x00, 0x27, 0x8D, 0x00, //
            0x14, 0x01, 0x01, //
            0x15, 0x01, 0x00,
        ];
        assert_eq!(encode_policy(&p).unwrap(), expected);
        assert_eq!(decode_policy(expected).unwrap(), p);
    }

    #[test]
    fn decode_rejects_malformed_streams() {
        assert_eq!(decode_policy(&[]), Err(TlvError::Empty));
        let p = policy(&[Purpose::Billing], 10, &[Recipient::Public]);
        let good = encode_policy(&p).unwrap();
        for cut in 1..good.len() {
            assert!(decode_policy(&good[..cut]).is_err(), "prefix {cut} accepted");
        }
        let mut unknown = good.clone();
        unknown.extend_from_slice(&[0x20, 0x00]);
        assert_eq!(decode_policy(&unknown), Err(TlvError::UnknownTag(0x20)));
        let bad = [
            0x11, 0x01, 0x00, 0x12, 0x02, 0x03, 0x02, 0x13, 0x04, 0, 0, 0, 10, 0x14, 0x00, 0x15,
            0x01, 0x00,
        ];
        assert_eq!(decode_policy(&bad), Err(TlvError::Unsorted(TAG_PURPOSES)));
        let swapped = [
            0x12, 0x01, 0x02, 0x11, 0x01, 0x00, 0x13, 0x04, 0, 0, 0, 10, 0x14, 0x00, 0x15, 0x01,
            0x00,
        ];
        assert_eq!(
            decode_policy(&swapped),
            Err(TlvError::OutOfOrder(TAG_CONTROLLER_CATEGORY))
        );
        let bad_flag = [
            0x11, 0x01, 0x00, 0x12, 0x00, 0x13, 0x04, 0, 0, 0, 10, 0x14, 0x00, 0x15, 0x01, 0x02,
        ];
        assert!(matches!(
            decode_policy(&bad_flag),
            Err(TlvError::BadCode { tag: TAG_CROSS_BORDER, code: 2 })
        ));
    }

    #[test]
    fn non_critical_extension_is_skipped() {
        let p = policy(&[Purpose::Billing], 10, &[Recipient::Public]);
        let mut bytes = encode_policy(&p).unwrap();
        bytes.extend_from_slice(&[0x90, 0x02, 0xAA, 0xBB]);
        assert_eq!(decode_policy(&bytes).unwrap(), p);
    }

    #[test]
    fn rendering() {
        let mut p = policy(&[Purpose::CountingVisitors], 0, &[Recipient::ControllerOnly]);
        let text = render_policy(&p);
        assert!(text.contains("deleted immediately"));
        assert!(text.contains("counting visitors"));
        assert_eq!(text.matches(". ").count() + 1, 6);
        p.retention = 30 * DAY;
        assert!(render_policy(&p).contains("at most 30 days"));
        p.retention = 5400;
        assert!(render_policy(&p).contains("90 minutes"));
    }
}
