//! The run trace: one JSON object per line with fields
//! `time_ms, seq, kind, subject, details` in that order. Detail keys are
//! sorted, so equal traces serialize to equal bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("malformed trace at line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
}

impl TraceError {
    pub fn malformed(line: usize, reason: impl Into<String>) -> Self {
        TraceError::MalformedTrace {
            line,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    RunStarted,
    NodeRegistered,
    LinkRegistered,
    Attach,
    Detach,
    FirmwareResolved,
    InstallRequested,
    InstanceStarted,
    InstanceStatus,
    Reserve,
    Release,
    Scale,
    FlowOpened,
    FlowRebound,
    FlowAdvance,
    Uplink,
    SchedulerTick,
    TickDeferred,
    TickReplayed,
    OffloadDecided,
    Defer,
    ActionStale,
    MigrationStarted,
    MigrationCompleted,
    CentralStatusUpdated,
    CommandDeferred,
    CommandReplayed,
    FaultStart,
    FaultEnd,
    Custom,
    Warning,
    RunFinished,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::RunStarted => "run_started",
            TraceKind::NodeRegistered => "node_registered",
            TraceKind::LinkRegistered => "link_registered",
            TraceKind::Attach => "attach",
            TraceKind::Detach => "detach",
            TraceKind::FirmwareResolved => "firmware_resolved",
            TraceKind::InstallRequested => "install_requested",
            TraceKind::InstanceStarted => "instance_started",
            TraceKind::InstanceStatus => "instance_status",
            TraceKind::Reserve => "reserve",
            TraceKind::Release => "release",
            TraceKind::Scale => "scale",
            TraceKind::FlowOpened => "flow_opened",
            TraceKind::FlowRebound => "flow_rebound",
            TraceKind::FlowAdvance => "flow_advance",
            TraceKind::Uplink => "uplink",
            TraceKind::SchedulerTick => "scheduler_tick",
            TraceKind::TickDeferred => "tick_deferred",
            TraceKind::TickReplayed => "tick_replayed",
            TraceKind::OffloadDecided => "offload_decided",
            TraceKind::Defer => "defer",
            TraceKind::ActionStale => "action_stale",
            TraceKind::MigrationStarted => "migration_started",
            TraceKind::MigrationCompleted => "migration_completed",
            TraceKind::CentralStatusUpdated => "central_status_updated",
            TraceKind::CommandDeferred => "command_deferred",
            TraceKind::CommandReplayed => "command_replayed",
            TraceKind::FaultStart => "fault_start",
            TraceKind::FaultEnd => "fault_end",
            TraceKind::Custom => "custom",
            TraceKind::Warning => "warning",
            TraceKind::RunFinished => "run_finished",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown kind `{s}`"))
    }
}

pub type Details = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub time_ms: SimTime,
    pub seq: u64,
    pub kind: TraceKind,
    pub subject: String,
    pub details: Details,
}

impl TraceRecord {
    pub fn u64(&self, key: &str) -> Option<u64> {
        self.details.get(key).and_then(Value::as_u64)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.details.get(key).and_then(Value::as_f64)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.details.get(key).and_then(Value::as_str)
    }
}

/// Builds a details map: `details! { "node" => id, "mem" => 12 }`.
#[macro_export]
macro_rules! details {
    () => { $crate::trace::Details::new() };
    ($($k:expr => $v:expr),+ $(,)?) => {{
        let mut d = $crate::trace::Details::new();
        $( d.insert(($k).to_string(), ::serde_json::json!($v)); )+
        d
    }};
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_ms: SimTime, kind: TraceKind, subject: impl Into<String>, details: Details) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            time_ms,
            seq,
            kind,
            subject: subject.into(),
            details,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses a trace and checks its framing: consecutive sequence numbers
    /// from zero and non-decreasing timestamps.
    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        let mut last_time = 0;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(line)
                .map_err(|e| TraceError::malformed(lineno, e.to_string()))?;
            if rec.seq != records.len() as u64 {
                return Err(TraceError::malformed(
                    lineno,
                    format!("expected seq {}, found {}", records.len(), rec.seq),
                ));
            }
            if rec.time_ms < last_time {
                return Err(TraceError::malformed(
                    lineno,
                    format!("time went backwards ({} < {last_time})", rec.time_ms),
                ));
            }
            last_time = rec.time_ms;
            records.push(rec);
        }
        Ok(Self { records })
    }

    /// SHA-256 of the serialized trace, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("trace records serialize"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
