//! Indirect communication: a device registry with geospatial lookup and a
//! consent registry guarded by bearer tokens.

mod http;
mod poll;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{render_policy, Policy};
use crate::state::{
    DataType, Declaration, DeviceId, DeviceProfile, Position, Range, SubjectDeviceId, Timestamp,
};

pub use http::{router, serve, BackgroundServer, HttpClient};
pub use poll::{PollReport, RegistryPoller, DEFAULT_POLL_PERIOD_MS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("missing or unknown token")]
    Unauthorized,
    #[error("token not allowed for this resource")]
    Forbidden,
    #[error("not found")]
    NotFound,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("registry unreachable: {0}")]
    Unreachable(String),
    #[error("unexpected status {0}")]
    Status(u16),
}

impl RegistryError {
    pub fn status(&self) -> u16 {
        match self {
            RegistryError::Unauthorized => 401,
            RegistryError::Forbidden => 403,
            RegistryError::NotFound => 404,
            RegistryError::BadRequest(_) => 400,
            RegistryError::Unreachable(_) => 503,
            RegistryError::Status(code) => *code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub device_id: DeviceId,
    pub position: Position,
    pub range: Range,
    pub data_type: DataType,
    pub policy: Policy,
    pub declared_at: Timestamp,
    pub human_readable: String,
}

impl RegistryRecord {
    pub fn new(device_id: DeviceId, profile: DeviceProfile, declared_at: Timestamp) -> Self {
        RegistryRecord {
            device_id,
            human_readable: render_policy(&profile.policy),
            position: profile.position,
            range: profile.range,
            data_type: profile.data_type,
            policy: profile.policy,
            declared_at,
        }
    }

    pub fn profile(&self) -> DeviceProfile {
        DeviceProfile {
            position: self.position,
            range: self.range,
            data_type: self.data_type,
            policy: self.policy.clone(),
        }
    }

    pub fn declaration(&self) -> Declaration {
        Declaration {
            device_id: self.device_id,
            profile: self.profile(),
        }
    }
}

/// Consent as submitted by a subject-side device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentSubmission {
    pub device_id: DeviceId,
    pub subject: SubjectDeviceId,
    pub policy: Policy,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub device_id: DeviceId,
    pub subject: SubjectDeviceId,
    pub policy: Policy,
    pub timestamp: Timestamp,
    /// Principal bound to the submitting token.
    pub token_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Data controller: may register devices and read consents for them.
    Dc,
    /// Data subject: may submit consents.
    Ds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub principal: String,
    pub role: Role,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenTable {
    pub tokens: Vec<TokenEntry>,
}

impl TokenTable {
    pub fn new(tokens: Vec<TokenEntry>) -> Self {
        TokenTable { tokens }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    fn lookup(&self, token: &str) -> Option<&TokenEntry> {
        self.tokens.iter().find(|t| t.token == token)
    }
}

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as Timestamp)
            .unwrap_or(0)
    })
}

struct DeviceEntry {
    record: RegistryRecord,
    owner: String,
}

/// The service state. All methods are safe to call concurrently; each write
/// holds the map lock for its whole read-modify-write.
pub struct Registry {
    tokens: TokenTable,
    clock: Clock,
    devices: RwLock<BTreeMap<DeviceId, DeviceEntry>>,
    consents: RwLock<Vec<ConsentRecord>>,
}

/// True iff the query disc of `radius_cm` around `center` intersects the
/// collection zone of `record`.
pub fn intersects(center: &Position, radius_cm: i128, record: &RegistryRecord) -> bool {
    let reach = radius_cm + record.range.centimeters();
    center.distance_sq_cm(&record.position) <= reach * reach
}

pub fn radius_to_cm(radius_m: f64) -> Result<i128, RegistryError> {
    if !radius_m.is_finite() || radius_m < 0.0 {
        return Err(RegistryError::BadRequest("radius must be a non-negative number".into()));
    }
    Ok((radius_m * 100.0).round() as i128)
}

impl Registry {
    pub fn new(tokens: TokenTable) -> Self {
        Self::with_clock(tokens, system_clock())
    }

    pub fn with_clock(tokens: TokenTable, clock: Clock) -> Self {
        Registry {
            tokens,
            clock,
            devices: RwLock::new(BTreeMap::new()),
            consents: RwLock::new(Vec::new()),
        }
    }

    fn principal(&self, token: Option<&str>) -> Result<&TokenEntry, RegistryError> {
        token
            .and_then(|t| self.tokens.lookup(t))
            .ok_or(RegistryError::Unauthorized)
    }

    fn controller(&self, token: Option<&str>) -> Result<&TokenEntry, RegistryError> {
        let entry = self.principal(token)?;
        if entry.role != Role::Dc {
            return Err(RegistryError::Forbidden);
        }
        Ok(entry)
    }

    pub fn put_device(
        &self,
        token: Option<&str>,
        device_id: DeviceId,
        profile: DeviceProfile,
    ) -> Result<RegistryRecord, RegistryError> {
        let entry = self.controller(token)?;
        let mut devices = self.devices.write().unwrap();
        if let Some(existing) = devices.get(&device_id) {
            if existing.owner != entry.principal {
                return Err(RegistryError::Forbidden);
            }
        }
        let record = RegistryRecord::new(device_id, profile, (self.clock)());
        devices.insert(
            device_id,
            DeviceEntry {
                record: record.clone(),
                owner: entry.principal.clone(),
            },
        );
        Ok(record)
    }

    pub fn get_device(&self, device_id: &DeviceId) -> Result<RegistryRecord, RegistryError> {
        self.devices
            .read()
            .unwrap()
            .get(device_id)
            .map(|e| e.record.clone())
            .ok_or(RegistryError::NotFound)
    }

    pub fn delete_device(
        &self,
        token: Option<&str>,
        device_id: &DeviceId,
    ) -> Result<(), RegistryError> {
        let entry = self.controller(token)?;
        let mut devices = self.devices.write().unwrap();
        match devices.get(device_id) {
            None => Err(RegistryError::NotFound),
            Some(existing) if existing.owner != entry.principal => Err(RegistryError::Forbidden),
            Some(_) => {
                devices.remove(device_id);
                Ok(())
            }
        }
    }

    pub fn nearby(
        &self,
        center: &Position,
        radius_m: f64,
    ) -> Result<Vec<RegistryRecord>, RegistryError> {
        let radius_cm = radius_to_cm(radius_m)?;
        Ok(self
            .devices
            .read()
            .unwrap()
            .values()
            .filter(|e| intersects(center, radius_cm, &e.record))
            .map(|e| e.record.clone())
            .collect())
    }

    pub fn post_consent(
        &self,
        token: Option<&str>,
        submission: ConsentSubmission,
    ) -> Result<ConsentRecord, RegistryError> {
        let entry = self.principal(token)?;
        if !submission.subject.is_well_formed() {
            return Err(RegistryError::BadRequest("subject identifier length".into()));
        }
        if !self.devices.read().unwrap().contains_key(&submission.device_id) {
            return Err(RegistryError::NotFound);
        }
        let record = ConsentRecord {
            device_id: submission.device_id,
            subject: submission.subject,
            policy: submission.policy,
            timestamp: submission.timestamp,
            token_id: entry.principal.clone(),
        };
        self.consents.write().unwrap().push(record.clone());
        Ok(record)
    }

    pub fn get_consents(
        &self,
        token: Option<&str>,
        device_id: &DeviceId,
        since: Timestamp,
    ) -> Result<Vec<ConsentRecord>, RegistryError> {
        let entry = self.controller(token)?;
        {
            let devices = self.devices.read().unwrap();
            let device = devices.get(device_id).ok_or(RegistryError::NotFound)?;
            if device.owner != entry.principal {
                return Err(RegistryError::Forbidden);
            }
        }
        Ok(self
            .consents
            .read()
            .unwrap()
            .iter()
            .filter(|c| c.device_id == *device_id && c.timestamp >= since)
            .cloned()
            .collect())
    }

    pub fn device_count(&self) -> usize {
        self.devices.read().unwrap().len()
    }
}

/// Uniform client surface over an embedded registry or a remote service.
pub trait RegistryApi {
    fn put_device(&self, id: DeviceId, profile: DeviceProfile) -> Result<RegistryRecord, RegistryError>;
    fn get_device(&self, id: &DeviceId) -> Result<RegistryRecord, RegistryError>;
    fn delete_device(&self, id: &DeviceId) -> Result<(), RegistryError>;
    fn nearby(&self, center: &Position, radius_m: f64) -> Result<Vec<RegistryRecord>, RegistryError>;
    fn post_consent(&self, submission: ConsentSubmission) -> Result<ConsentRecord, RegistryError>;
    fn get_consents(&self, id: &DeviceId, since: Timestamp) -> Result<Vec<ConsentRecord>, RegistryError>;
}

/// In-process client carrying one principal's token.
#[derive(Clone)]
pub struct LocalClient {
    registry: Arc<Registry>,
    token: Option<String>,
    online: Arc<std::sync::atomic::AtomicBool>,
}

impl LocalClient {
    pub fn new(registry: Arc<Registry>, token: Option<&str>) -> Self {
        LocalClient {
            registry,
            token: token.map(str::to_owned),
            online: Arc::new(std::sync::atomic::AtomicBool::new(true)),
        }
    }

    /// Simulates a network partition: every call fails while offline.
    pub fn set_online(&self, online: bool) {
        self.online.store(online, std::sync::atomic::Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), RegistryError> {
        if self.online.load(std::sync::atomic::Ordering::SeqCst) {
            Ok(())
        } else {
            Err(RegistryError::Unreachable("offline".into()))
        }
    }

    fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }
}

impl RegistryApi for LocalClient {
    fn put_device(&self, id: DeviceId, profile: DeviceProfile) -> Result<RegistryRecord, RegistryError> {
        self.check()?;
        self.registry.put_device(self.token(), id, profile)
    }

    fn get_device(&self, id: &DeviceId) -> Result<RegistryRecord, RegistryError> {
        self.check()?;
        self.registry.get_device(id)
    }

    fn delete_device(&self, id: &DeviceId) -> Result<(), RegistryError> {
        self.check()?;
        self.registry.delete_device(self.token(), id)
    }

    fn nearby(&self, center: &Position, radius_m: f64) -> Result<Vec<RegistryRecord>, RegistryError> {
        self.check()?;
        self.registry.nearby(center, radius_m)
    }

    fn post_consent(&self, submission: ConsentSubmission) -> Result<ConsentRecord, RegistryError> {
        self.check()?;
        self.registry.post_consent(self.token(), submission)
    }

    fn get_consents(&self, id: &DeviceId, since: Timestamp) -> Result<Vec<ConsentRecord>, RegistryError> {
        self.check()?;
        self.registry.get_consents(self.token(), id, since)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ControllerCategory, Purpose, Recipient};
    use std::sync::atomic::{AtomicU64, Ordering};

    fn tokens() -> TokenTable {
        TokenTable::new(vec![
            TokenEntry { token: "dc-a".into(), principal: "museum".into(), role: Role::Dc },
            TokenEntry { token: "dc-b".into(), principal: "shop".into(), role: Role::Dc },
            TokenEntry { token: "ds-1".into(), principal: "alice".into(), role: Role::Ds },
        ])
    }

    fn profile(x: f64, y: f64, range: f64, retention: u32) -> DeviceProfile {
        DeviceProfile {
            position: Position::from_meters(x, y),
            range: Range::from_meters(range),
            data_type: DataType::MacAddress,
            policy: Policy {
                controller_id: "MUSE".into(),
                controller_category: ControllerCategory::Museum,
                purposes: [Purpose::CountingVisitors].into_iter().collect(),
                retention,
                recipients: [Recipient::ControllerOnly].into_iter().collect(),
                cross_border: false,
            },
        }
    }

    fn registry() -> (Registry, Arc<AtomicU64>) {
        let now = Arc::new(AtomicU64::new(100));
        let clock = now.clone();
        let reg = Registry::with_clock(tokens(), Arc::new(move || clock.load(Ordering::SeqCst)));
        (reg, now)
    }

    #[test]
    fn last_write_wins() {
        let (reg, now) = registry();
        let id = DeviceId::from_label("wifi-1").unwrap();
        reg.put_device(Some("dc-a"), id, profile(0.0, 0.0, 10.0, 60)).unwrap();
        now.store(200, Ordering::SeqCst);
        let second = reg.put_device(Some("dc-a"), id, profile(0.0, 0.0, 10.0, 120)).unwrap();
        let got = reg.get_device(&id).unwrap();
        assert_eq!(got, second);
        assert_eq!(got.declared_at, 200);
        assert_eq!(got.policy.retention, 120);
        assert_eq!(got.human_readable, render_policy(&got.policy));
    }

    #[test]
    fn auth_rules() {
        let (reg, _) = registry();
        let id = DeviceId::from_label("wifi-1").unwrap();
        let p = profile(0.0, 0.0, 10.0, 60);
        assert_eq!(reg.put_device(None, id, p.clone()), Err(RegistryError::Unauthorized));
        assert_eq!(reg.put_device(Some("nope"), id, p.clone()), Err(RegistryError::Unauthorized));
        assert_eq!(reg.put_device(Some("ds-1"), id, p.clone()), Err(RegistryError::Forbidden));
        reg.put_device(Some("dc-a"), id, p.clone()).unwrap();
        assert_eq!(reg.put_device(Some("dc-b"), id, p.clone()), Err(RegistryError::Forbidden));
        assert_eq!(reg.delete_device(Some("dc-b"), &id), Err(RegistryError::Forbidden));
        assert_eq!(
            reg.get_device(&DeviceId::from_label("other").unwrap()),
            Err(RegistryError::NotFound)
        );
        reg.delete_device(Some("dc-a"), &id).unwrap();
        assert_eq!(reg.delete_device(Some("dc-a"), &id), Err(RegistryError::NotFound));
    }

    #[test]
    fn nearby_boundaries() {
        let (reg, _) = registry();
        let id = DeviceId::from_label("wifi-1").unwrap();
        reg.put_device(Some("dc-a"), id, profile(10.0, 0.0, 5.0, 60)).unwrap();
        let at = |x: f64| Position::from_meters(x, 0.0);
        assert_eq!(reg.nearby(&at(10.0), 0.0).unwrap().len(), 1);
        // distance 8 = radius 3 + range 5
        assert_eq!(reg.nearby(&at(2.0), 3.0).unwrap().len(), 1);
        assert_eq!(reg.nearby(&at(1.9), 3.0).unwrap().len(), 0);
        assert!(matches!(reg.nearby(&at(0.0), -1.0), Err(RegistryError::BadRequest(_))));
    }

    #[test]
    fn consent_log() {
        let (reg, _) = registry();
        let id = DeviceId::from_label("wifi-1").unwrap();
        reg.put_device(Some("dc-a"), id, profile(0.0, 0.0, 10.0, 60)).unwrap();
        let submission = |t| ConsentSubmission {
            device_id: id,
            subject: SubjectDeviceId::mac([1, 2, 3, 4, 5, 6]),
            policy: profile(0.0, 0.0, 0.0, 60).policy,
            timestamp: t,
        };
        reg.post_consent(Some("ds-1"), submission(10)).unwrap();
        reg.post_consent(Some("ds-1"), submission(20)).unwrap();
        assert_eq!(reg.post_consent(None, submission(30)), Err(RegistryError::Unauthorized));
        let all = reg.get_consents(Some("dc-a"), &id, 0).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].token_id, "alice");
        assert_eq!(reg.get_consents(Some("dc-a"), &id, 15).unwrap(), all[1..].to_vec());
        assert_eq!(reg.get_consents(Some("dc-b"), &id, 0), Err(RegistryError::Forbidden));
        assert_eq!(reg.get_consents(Some("ds-1"), &id, 0), Err(RegistryError::Forbidden));
    }
}
