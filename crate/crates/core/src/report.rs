//! Post-run metrics, computed from the trace alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::topology::ResourceVector;
use crate::trace::{Trace, TraceError, TraceKind, TraceRecord};
use crate::SimTime;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub start_ms: SimTime,
    pub end_ms: SimTime,
    pub generated_bits: u64,
    pub delivered_bits: u64,
    pub dropped_bits: u64,
    pub uplink_bits: f64,
    /// Uplink over generated bits; `None` when nothing was generated.
    pub uplink_ratio: Option<f64>,
    /// Bottleneck utilization of every node at the end of the window.
    pub utilization: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationSummary {
    pub instance: String,
    pub from: String,
    pub to: String,
    pub started_at: SimTime,
    pub completed_at: SimTime,
    pub downtime_ms: u64,
    pub bytes_moved_mb: f64,
    pub state_version: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounters {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub buffered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_ms: SimTime,
    pub kind: String,
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub generated_bits: u64,
    pub delivered_bits: u64,
    pub dropped_bits: u64,
    pub buffered_bits: u64,
    pub uplink_bits: f64,
    pub uplink_ratio: Option<f64>,
    pub migrations: usize,
    pub offloads: usize,
    pub defers: usize,
    pub deferred_ticks: usize,
    pub replayed_ticks: usize,
    pub deferred_commands: usize,
    pub warnings: usize,
    pub peak_utilization: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub end_ms: SimTime,
    pub window_ms: SimTime,
    pub windows: Vec<WindowMetrics>,
    pub migrations: Vec<MigrationSummary>,
    /// Per-device flow counters accumulated from `flow_advance` records.
    pub flows: BTreeMap<String, FlowCounters>,
    /// Offload decisions, defers, stale actions and controller backlog.
    pub control_log: Vec<LogEntry>,
    pub summary: Summary,
}

fn need<T>(v: Option<T>, rec: &TraceRecord, key: &str) -> Result<T, TraceError> {
    v.ok_or_else(|| {
        TraceError::malformed(
            rec.seq as usize + 1,
            format!("`{}` record lacks `{key}`", rec.kind),
        )
    })
}

fn share(alloc: &ResourceVector, cap: &ResourceVector) -> f64 {
    alloc.bottleneck_share(cap).as_f64()
}

struct Replay {
    capacity: BTreeMap<String, ResourceVector>,
    alloc: BTreeMap<String, ResourceVector>,
}

impl Replay {
    fn snapshot(&self) -> BTreeMap<String, f64> {
        self.capacity
            .iter()
            .map(|(id, cap)| (id.clone(), share(&self.alloc[id], cap)))
            .collect()
    }

    fn peak(&self, peaks: &mut BTreeMap<String, f64>, node: &str) {
        if let (Some(a), Some(c)) = (self.alloc.get(node), self.capacity.get(node)) {
            let u = share(a, c);
            let p = peaks.entry(node.to_owned()).or_insert(0.0);
            if u > *p {
                *p = u;
            }
        }
    }
}

/// Rebuilds the run report from its trace. An empty trace gives an empty report.
pub fn report_from_trace(trace: &Trace) -> Result<Report, TraceError> {
    let records = trace.records();
    let Some(first) = records.first() else {
        return Ok(Report::default());
    };
    let last = records.last().expect("non-empty");
    if first.kind != TraceKind::RunStarted {
        return Err(TraceError::malformed(1, "trace must open with run_started"));
    }
    if last.kind != TraceKind::RunFinished {
        return Err(TraceError::malformed(records.len(), "trace must close with run_finished (truncated?)"));
    }
    let mut last_time = 0;
    for (i, r) in records.iter().enumerate() {
        if r.seq != i as u64 || r.time_ms < last_time {
            return Err(TraceError::malformed(i + 1, "sequence or time out of order"));
        }
        last_time = r.time_ms;
        if i > 0 && r.kind == TraceKind::RunStarted || i + 1 < records.len() && r.kind == TraceKind::RunFinished {
            return Err(TraceError::malformed(i + 1, "run framing record in the middle of a trace"));
        }
    }

    let window_ms = need(first.u64("metrics_window_ms"), first, "metrics_window_ms")?.max(1);
    let end_ms = last.time_ms;
    let n_windows = end_ms.div_ceil(window_ms) as usize;
    let mut windows: Vec<WindowMetrics> = (0..n_windows as u64)
        .map(|w| WindowMetrics {
            start_ms: w * window_ms,
            end_ms: ((w + 1) * window_ms).min(end_ms),
            ..WindowMetrics::default()
        })
        .collect();
    let window_of = |t: SimTime| ((t / window_ms) as usize).min(n_windows.saturating_sub(1));

    let mut report = Report {
        name: first.subject.clone(),
        seed: need(first.u64("seed"), first, "seed")?,
        end_ms,
        window_ms,
        ..Report::default()
    };
    let mut replay = Replay {
        capacity: BTreeMap::new(),
        alloc: BTreeMap::new(),
    };
    let mut peaks = BTreeMap::new();
    let mut next_snapshot = 0usize;

    for r in records {
        // Close every window that ends at or before this record.
        while next_snapshot < n_windows && r.time_ms >= windows[next_snapshot].end_ms && r.kind != TraceKind::RunFinished {
            windows[next_snapshot].utilization = replay.snapshot();
            next_snapshot += 1;
        }
        match r.kind {
            TraceKind::NodeRegistered => {
                let cap = ResourceVector::new(
                    need(r.u64("cpu"), r, "cpu")?,
                    need(r.u64("mem"), r, "mem")?,
                    need(r.u64("storage"), r, "storage")?,
                );
                replay.capacity.insert(r.subject.clone(), cap);
                replay.alloc.insert(r.subject.clone(), ResourceVector::ZERO);
                peaks.insert(r.subject.clone(), 0.0);
            }
            TraceKind::Reserve | TraceKind::Release => {
                let rv = ResourceVector::new(
                    need(r.u64("cpu"), r, "cpu")?,
                    need(r.u64("mem"), r, "mem")?,
                    need(r.u64("storage"), r, "storage")?,
                );
                let cur = need(replay.alloc.get(&r.subject).copied(), r, "known node")?;
                let next = if r.kind == TraceKind::Reserve {
                    cur.checked_add(&rv)
                } else {
                    cur.checked_sub(&rv)
                };
                let next = need(next, r, "consistent allocation")?;
                replay.alloc.insert(r.subject.clone(), next);
                replay.peak(&mut peaks, &r.subject);
            }
            TraceKind::FlowAdvance => {
                let from = need(r.u64("from_ms"), r, "from_ms")?;
                let g = need(r.u64("generated"), r, "generated")?;
                let d = need(r.u64("delivered"), r, "delivered")?;
                let x = need(r.u64("dropped"), r, "dropped")?;
                let b = need(r.u64("buffered"), r, "buffered")?;
                if n_windows > 0 {
                    let w = &mut windows[window_of(from)];
                    w.generated_bits += g;
                    w.delivered_bits += d;
                    w.dropped_bits += x;
                }
                let c = report.flows.entry(r.subject.clone()).or_default();
                c.generated += g;
                c.delivered += d;
                c.dropped += x;
                c.buffered = b;
            }
            TraceKind::Uplink => {
                let from = need(r.u64("from_ms"), r, "from_ms")?;
                let bits = need(r.f64("bits"), r, "bits")?;
                if n_windows > 0 {
                    windows[window_of(from)].uplink_bits += bits;
                }
                report.summary.uplink_bits += bits;
            }
            TraceKind::MigrationCompleted => {
                report.migrations.push(MigrationSummary {
                    instance: r.subject.clone(),
                    from: need(r.str("from"), r, "from")?.to_owned(),
                    to: need(r.str("to"), r, "to")?.to_owned(),
                    started_at: need(r.u64("started_at"), r, "started_at")?,
                    completed_at: need(r.u64("completed_at"), r, "completed_at")?,
                    downtime_ms: need(r.u64("downtime_ms"), r, "downtime_ms")?,
                    bytes_moved_mb: need(r.f64("bytes_moved_mb"), r, "bytes_moved_mb")?,
                    state_version: need(r.u64("state_version"), r, "state_version")?,
                });
            }
            TraceKind::OffloadDecided => {
                report.summary.offloads += 1;
                report.control_log.push(LogEntry {
                    time_ms: r.time_ms,
                    kind: r.kind.to_string(),
                    subject: r.subject.clone(),
                    detail: format!(
                        "{} -> {}",
                        r.str("from").unwrap_or("?"),
                        r.str("target").unwrap_or("?")
                    ),
                });
            }
            TraceKind::Defer | TraceKind::ActionStale | TraceKind::TickDeferred | TraceKind::CommandDeferred => {
                match r.kind {
                    TraceKind::Defer => report.summary.defers += 1,
                    TraceKind::TickDeferred => report.summary.deferred_ticks += 1,
                    TraceKind::CommandDeferred => report.summary.deferred_commands += 1,
                    _ => {}
                }
                let detail = ["reason", "message", "command"]
                    .iter()
                    .find_map(|k| r.str(k))
                    .unwrap_or("")
                    .to_owned();
                report.control_log.push(LogEntry {
                    time_ms: r.time_ms,
                    kind: r.kind.to_string(),
                    subject: r.subject.clone(),
                    detail,
                });
            }
            TraceKind::TickReplayed => report.summary.replayed_ticks += 1,
            TraceKind::Warning => report.summary.warnings += 1,
            _ => {}
        }
    }
    while next_snapshot < n_windows {
        windows[next_snapshot].utilization = replay.snapshot();
        next_snapshot += 1;
    }
    for w in &mut windows {
        w.uplink_ratio = (w.generated_bits > 0).then(|| w.uplink_bits / w.generated_bits as f64);
    }

    let s = &mut report.summary;
    for c in report.flows.values() {
        s.generated_bits += c.generated;
        s.delivered_bits += c.delivered;
        s.dropped_bits += c.dropped;
        s.buffered_bits += c.buffered;
    }
    s.uplink_ratio = (s.generated_bits > 0).then(|| s.uplink_bits / s.generated_bits as f64);
    s.migrations = report.migrations.len();
    s.peak_utilization = peaks;
    report.windows = windows;
    Ok(report)
}

impl Report {
    /// Writes one row per metrics window.
    pub fn write_metrics<W: Write>(&self, out: W) -> csv::Result<()> {
        let nodes: Vec<&String> = self
            .windows
            .first()
            .map(|w| w.utilization.keys().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "window_start_ms".to_owned(),
            "window_end_ms".to_owned(),
            "generated_bits".to_owned(),
            "delivered_bits".to_owned(),
            "dropped_bits".to_owned(),
            "uplink_bits".to_owned(),
            "uplink_ratio".to_owned(),
        ];
        header.extend(nodes.iter().map(|n| format!("util_{n}")));
        w.write_record(&header)?;
        for win in &self.windows {
            let mut row = vec![
                win.start_ms.to_string(),
                win.end_ms.to_string(),
                win.generated_bits.to_string(),
                win.delivered_bits.to_string(),
                win.dropped_bits.to_string(),
                format!("{:.3}", win.uplink_bits),
                win.uplink_ratio.map(|r| format!("{r:.6}")).unwrap_or_default(),
            ];
            row.extend(
                nodes
                    .iter()
                    .map(|n| format!("{:.4}", win.utilization.get(*n).copied().unwrap_or(0.0))),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.summary;
        writeln!(f, "run {} (seed {}), {} ms", self.name, self.seed, self.end_ms)?;
        writeln!(
            f,
            "  bits: generated {} delivered {} dropped {} buffered {}",
            s.generated_bits, s.delivered_bits, s.dropped_bits, s.buffered_bits
        )?;
        match s.uplink_ratio {
            Some(r) => writeln!(f, "  uplink: {:.0} bits, ratio {r:.4}", s.uplink_bits)?,
            None => writeln!(f, "  uplink: {:.0} bits", s.uplink_bits)?,
        }
        writeln!(
            f,
            "  control: {} migrations, {} offloads, {} defers, {} ticks deferred / {} replayed, {} commands deferred, {} warnings",
            s.migrations, s.offloads, s.defers, s.deferred_ticks, s.replayed_ticks, s.deferred_commands, s.warnings
        )?;
        if !s.peak_utilization.is_empty() {
            writeln!(f, "  {:<16} {:>8}", "node", "peak")?;
            for (node, u) in &s.peak_utilization {
                writeln!(f, "  {node:<16} {u:>8.3}")?;
            }
        }
        for m in &self.migrations {
            writeln!(
                f,
                "  migration {} {} -> {} at {} ms, downtime {} ms, state v{}",
                m.instance, m.from, m.to, m.started_at, m.downtime_ms, m.state_version
            )?;
        }
        Ok(())
    }
}
