//! Brute-force reference implementations. Nothing here calls into the
//! production placement, routing or flow code; they only read plain data
//! (node capacities, link lists, trace records).

use std::collections::{BTreeMap, BTreeSet};

use edgecloud::catalog::AppSpec;
use edgecloud::ids::NodeId;
use edgecloud::topology::Topology;
use edgecloud::trace::{Trace, TraceKind, TraceRecord};

const INF: u64 = u64::MAX / 4;

/// All-pairs shortest latency (Floyd–Warshall) over links that are up and
/// whose endpoints are both up.
pub fn all_pairs(topo: &Topology) -> (Vec<NodeId>, Vec<Vec<u64>>) {
    let ids: Vec<NodeId> = topo.nodes().map(|n| n.id.clone()).collect();
    let idx: BTreeMap<&NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let up: BTreeSet<&NodeId> = topo.nodes().filter(|n| n.down_faults == 0).map(|n| &n.id).collect();
    let n = ids.len();
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for l in topo.links() {
        if l.down_faults > 0 || !up.contains(&l.a) || !up.contains(&l.b) {
            continue;
        }
        let (a, b) = (idx[&l.a], idx[&l.b]);
        d[a][b] = d[a][b].min(l.latency_ms);
        d[b][a] = d[b][a].min(l.latency_ms);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k].saturating_add(d[k][j]);
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    (ids, d)
}

pub fn latency(topo: &Topology, a: &NodeId, b: &NodeId) -> Option<u64> {
    let (ids, d) = all_pairs(topo);
    let i = ids.iter().position(|x| x == a)?;
    let j = ids.iter().position(|x| x == b)?;
    (d[i][j] < INF).then_some(d[i][j])
}

/// `a/b < c/e` for non-negative fractions, exactly.
fn frac_less(a: u64, b: u64, c: u64, e: u64) -> bool {
    (a as u128) * (e as u128) < (c as u128) * (b as u128)
}

/// Enumerates every node and picks the best feasible host by
/// (latency, most free capacity, node id).
///
/// Free capacity of a node is its scarcest dimension: min over cpu, mem,
/// storage of free / capacity.
pub fn brute_force_place(topo: &Topology, app: &AppSpec, source: &NodeId, replicas: u32) -> Option<NodeId> {
    let (ids, d) = all_pairs(topo);
    let s = ids.iter().position(|x| x == source)?;
    let r = replicas as u64;
    let want = [app.demand.cpu * r, app.demand.mem * r, app.demand.storage * r];

    // (latency, free numerator, free denominator, id)
    let mut best: Option<(u64, u64, u64, NodeId)> = None;
    for (i, id) in ids.iter().enumerate() {
        let node = topo.node(id).unwrap();
        if node.down_faults > 0 || !app.allowed_tiers.contains(&node.tier) {
            continue;
        }
        let cap = [node.capacity.cpu, node.capacity.mem, node.capacity.storage];
        let used = [node.alloc.cpu, node.alloc.mem, node.alloc.storage];
        if (0..3).any(|k| used[k] + want[k] > cap[k]) {
            continue;
        }
        let lat = d[s][i];
        if lat >= INF {
            continue;
        }
        if let Some(limit) = app.latency_requirement_ms {
            if lat > limit {
                continue;
            }
        }
        let mut free = (cap[0] - used[0], cap[0]);
        for k in 1..3 {
            if frac_less(cap[k] - used[k], cap[k], free.0, free.1) {
                free = (cap[k] - used[k], cap[k]);
            }
        }
        let better = match &best {
            None => true,
            Some((bl, bn, bd, bid)) => {
                if lat != *bl {
                    lat < *bl
                } else if frac_less(*bn, *bd, free.0, free.1) {
                    true
                } else if frac_less(free.0, free.1, *bn, *bd) {
                    false
                } else {
                    id < bid
                }
            }
        };
        if better {
            best = Some((lat, free.0, free.1, id.clone()));
        }
    }
    best.map(|b| b.3)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub buffered: u64,
}

fn field(r: &TraceRecord, key: &str) -> u64 {
    r.details
        .get(key)
        .and_then(|v| v.as_u64())
        .unwrap_or_else(|| panic!("record {} lacks integer `{key}`", r.seq))
}

/// Per-device flow counters summed from raw `flow_advance` records.
pub fn recompute_counters(trace: &Trace) -> BTreeMap<String, Counters> {
    let mut out: BTreeMap<String, Counters> = BTreeMap::new();
    for r in trace.records().iter().filter(|r| r.kind == TraceKind::FlowAdvance) {
        let c = out.entry(r.subject.clone()).or_default();
        c.generated += field(r, "generated");
        c.delivered += field(r, "delivered");
        c.dropped += field(r, "dropped");
        c.buffered = field(r, "buffered");
    }
    out
}

/// Counters the platform reported in its closing record.
pub fn final_counters(trace: &Trace) -> BTreeMap<String, Counters> {
    let last = trace.records().last().expect("non-empty trace");
    assert_eq!(last.kind, TraceKind::RunFinished);
    let flows = last.details["flows"].as_object().expect("flows map");
    flows
        .iter()
        .map(|(dev, v)| {
            let g = |k: &str| v[k].as_u64().unwrap();
            (
                dev.clone(),
                Counters {
                    generated: g("generated"),
                    delivered: g("delivered"),
                    dropped: g("dropped"),
                    buffered: g("buffered"),
                },
            )
        })
        // Flows that never advanced carry all-zero counters.
        .filter(|(_, c)| *c != Counters::default())
        .collect()
}

/// Replays the trace and returns every invariant violation found:
/// allocations within capacity, bit conservation per device at every
/// step, per-link delivery within bandwidth, at most one attachment per
/// device, tier placement rules, and agreement with the closing record.
pub fn check_invariants(trace: &Trace) -> Vec<String> {
    let mut bad = Vec::new();
    let recs = trace.records();
    if recs.is_empty() {
        return bad;
    }
    let flow_tick = recs[0].details.get("flow_tick_ms").and_then(|v| v.as_u64()).unwrap_or(100);

    let mut cap: BTreeMap<String, [u64; 3]> = BTreeMap::new();
    let mut tier: BTreeMap<String, String> = BTreeMap::new();
    let mut alloc: BTreeMap<String, [i128; 3]> = BTreeMap::new();
    let mut bandwidth: BTreeMap<String, u64> = BTreeMap::new();
    let mut cum: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    let mut attached: BTreeMap<String, String> = BTreeMap::new();
    // (time, link) -> delivered bits
    let mut link_load: BTreeMap<(u64, String), (u64, usize)> = BTreeMap::new();
    let mut last_time = 0;

    for r in recs {
        if r.time_ms < last_time {
            bad.push(format!("seq {}: time went backwards", r.seq));
        }
        last_time = r.time_ms;
        match r.kind {
            TraceKind::NodeRegistered => {
                cap.insert(r.subject.clone(), [field(r, "cpu"), field(r, "mem"), field(r, "storage")]);
                tier.insert(r.subject.clone(), r.details["tier"].as_str().unwrap().to_owned());
                alloc.insert(r.subject.clone(), [0; 3]);
            }
            TraceKind::LinkRegistered => {
                bandwidth.insert(r.subject.clone(), field(r, "bandwidth_mbps"));
            }
            TraceKind::Reserve | TraceKind::Release => {
                let sign: i128 = if r.kind == TraceKind::Reserve { 1 } else { -1 };
                let v = [field(r, "cpu"), field(r, "mem"), field(r, "storage")];
                let a = alloc.get_mut(&r.subject).expect("known node");
                let c = cap[&r.subject];
                for k in 0..3 {
                    a[k] += sign * v[k] as i128;
                    if a[k] < 0 || a[k] > c[k] as i128 {
                        bad.push(format!("seq {}: alloc on {} out of [0, capacity]", r.seq, r.subject));
                    }
                }
            }
            TraceKind::FlowAdvance => {
                let (g, d, x, b) = (field(r, "generated"), field(r, "delivered"), field(r, "dropped"), field(r, "buffered"));
                let e = cum.entry(r.subject.clone()).or_default();
                e.0 += g;
                e.1 += d;
                e.2 += x;
                if e.0 != e.1 + e.2 + b {
                    bad.push(format!("seq {}: {} not conserved", r.seq, r.subject));
                }
                for l in r.details["links"].as_array().unwrap() {
                    let slot = link_load.entry((r.time_ms, l.as_str().unwrap().to_owned())).or_default();
                    slot.0 += d;
                    slot.1 += 1;
                }
            }
            TraceKind::Attach => {
                let gw = r.details["gateway"].as_str().unwrap().to_owned();
                if let Some(prev) = attached.get(&r.subject) {
                    if *prev != gw {
                        bad.push(format!("seq {}: {} attached to {prev} and {gw}", r.seq, r.subject));
                    }
                }
                attached.insert(r.subject.clone(), gw);
            }
            TraceKind::Detach => {
                attached.remove(&r.subject);
            }
            TraceKind::InstanceStarted => {
                let host = r.details["host"].as_str().unwrap();
                let kind = r.details["kind"].as_str().unwrap();
                let t = tier[host].as_str();
                if (kind == "iot_app") != (t == "gateway") {
                    bad.push(format!("seq {}: {kind} {} on {t}", r.seq, r.subject));
                }
            }
            TraceKind::MigrationCompleted => {
                let to = r.details["to"].as_str().unwrap();
                let from = r.details["from"].as_str().unwrap();
                if (tier[to] == "gateway") != (tier[from] == "gateway") {
                    bad.push(format!("seq {}: {} crossed the gateway tier boundary", r.seq, r.subject));
                }
            }
            TraceKind::RunFinished => {
                let fin = r.details["alloc"].as_object().unwrap();
                for (node, v) in fin {
                    let a = alloc[node];
                    let got = [v["cpu"].as_u64().unwrap(), v["mem"].as_u64().unwrap(), v["storage"].as_u64().unwrap()];
                    if (0..3).any(|k| a[k] != got[k] as i128) {
                        bad.push(format!("final alloc of {node} disagrees with replay"));
                    }
                }
            }
            _ => {}
        }
    }
    for ((t, link), (bits, _)) in &link_load {
        let limit = bandwidth[link] * flow_tick * 1000;
        if *bits > limit {
            bad.push(format!("t={t}: link {link} carried {bits} bits > {limit}"));
        }
    }
    if recs.last().map(|r| r.kind) == Some(TraceKind::RunFinished) && recompute_counters(trace) != final_counters(trace) {
        bad.push("recomputed flow counters disagree with the closing record".into());
    }
    bad
}

/// Host sequence of every instance, following completed migrations.
pub fn host_histories(trace: &Trace) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in trace.records() {
        match r.kind {
            TraceKind::InstanceStarted => {
                out.insert(r.subject.clone(), vec![r.details["host"].as_str().unwrap().to_owned()]);
            }
            TraceKind::MigrationCompleted => {
                out.entry(r.subject.clone())
                    .or_default()
                    .push(r.details["to"].as_str().unwrap().to_owned());
            }
            _ => {}
        }
    }
    out
}

/// Instances that moved A→B→A.
pub fn flaps(trace: &Trace) -> Vec<String> {
    host_histories(trace)
        .into_iter()
        .filter(|(_, h)| h.windows(3).any(|w| w[0] == w[2]))
        .map(|(id, h)| format!("{id}: {}", h.join(" -> ")))
        .collect()
}
