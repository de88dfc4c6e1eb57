use std::collections::HashMap;

use super::{RegistryApi, RegistryError};
use crate::state::{Declaration, DeviceId, Position, Timestamp};

pub const DEFAULT_POLL_PERIOD_MS: u64 = 2_000;
const MAX_BACKOFF_SHIFT: u32 = 4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PollReport {
    /// Records seen for the first time or with a new `declared_at`.
    pub declarations: Vec<Declaration>,
    pub error: Option<RegistryError>,
}

/// Periodic `nearby` query at the subject's current position.
pub struct RegistryPoller {
    period_ms: u64,
    lookahead_m: f64,
    next_due: Timestamp,
    seen: HashMap<DeviceId, Timestamp>,
    failures: u32,
    last_success: Option<Timestamp>,
    started: Timestamp,
}

impl RegistryPoller {
    pub fn new(start: Timestamp) -> Self {
        RegistryPoller {
            period_ms: DEFAULT_POLL_PERIOD_MS,
            lookahead_m: 0.0,
            next_due: start,
            seen: HashMap::new(),
            failures: 0,
            last_success: None,
            started: start,
        }
    }

    pub fn with_period(mut self, period_ms: u64) -> Self {
        self.period_ms = period_ms.max(1);
        self
    }

    /// Query radius around the subject, so zones are learned before entry.
    pub fn with_lookahead(mut self, meters: f64) -> Self {
        self.lookahead_m = meters.max(0.0);
        self
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn next_due(&self) -> Timestamp {
        self.next_due
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }

    /// Time since the last successful query (or since start if none).
    pub fn staleness(&self, now: Timestamp) -> u64 {
        now.saturating_sub(self.last_success.unwrap_or(self.started))
    }

    /// Runs one query if due. A subject without a position skips the query.
    pub fn poll(
        &mut self,
        now: Timestamp,
        position: Option<Position>,
        api: &dyn RegistryApi,
    ) -> PollReport {
        let mut report = PollReport::default();
        if now < self.next_due {
            return report;
        }
        let Some(position) = position else {
            self.next_due = now + self.period_ms;
            return report;
        };
        match api.nearby(&position, self.lookahead_m) {
            Ok(records) => {
                self.failures = 0;
                self.last_success = Some(now);
                self.next_due = now + self.period_ms;
                for r in records {
                    if self.seen.get(&r.device_id) != Some(&r.declared_at) {
                        self.seen.insert(r.device_id, r.declared_at);
                        report.declarations.push(r.declaration());
                    }
                }
            }
            Err(e) => {
                self.failures += 1;
                let shift = self.failures.min(MAX_BACKOFF_SHIFT);
                self.next_due = now + (self.period_ms << shift);
                report.error = Some(e);
            }
        }
        report
    }
}
