//! Seeded generators for small random worlds, used by sweeps and tests.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{AppKind, AppSpec, Catalog};
use crate::ids::{AppId, DeviceId, InstanceId, NodeId};
use crate::kernel::FaultKind;
use crate::scenario::{
    AppDef, DeviceDef, FirmwareDef, LinkDef, NodeDef, Scenario, ScriptStep, ThresholdDef, SCHEMA_VERSION,
};
use crate::scheduler::PlacementRequest;
use crate::topology::{Node, ResourceVector, Tier, Topology};

/// A topology, a catalog of Data-Apps and placement requests to run
/// against them in order.
#[derive(Debug, Clone)]
pub struct PlacementCase {
    pub topology: Topology,
    pub catalog: Catalog,
    pub requests: Vec<PlacementRequest>,
}

/// Random connected topology of up to `max_nodes` nodes with some capacity
/// already taken, plus up to `max_requests` Data-App requests.
pub fn placement_case(seed: u64, max_nodes: usize, max_requests: usize) -> PlacementCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_nodes.max(2));
    let mut topology = Topology::new();
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let tier = match i {
            0 => Tier::Gateway,
            1 => Tier::EdgeModule,
            _ => *[Tier::Gateway, Tier::EdgeModule, Tier::EdgeModule, Tier::CentralCloud]
                .choose(&mut rng)
                .expect("non-empty"),
        };
        let cap = ResourceVector::new(
            rng.gen_range(1..=8) * 1000,
            rng.gen_range(1..=16) * 1024,
            rng.gen_range(1..=64) * 1024,
        );
        let id = NodeId::new(format!("n{i}"));
        topology.add_node(Node::new(id.clone(), tier, cap)).expect("fresh id");
        ids.push(id);
    }
    // Spanning tree first so most pairs are reachable, then a few extra links.
    for i in 1..n {
        let j = rng.gen_range(0..i);
        topology
            .add_link(&ids[i], &ids[j], rng.gen_range(1..=30), rng.gen_range(1..=1000))
            .expect("known nodes");
    }
    for _ in 0..rng.gen_range(0..=n) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            topology
                .add_link(&ids[a], &ids[b], rng.gen_range(1..=30), rng.gen_range(1..=1000))
                .expect("known nodes");
        }
    }
    for id in &ids {
        if rng.gen_bool(0.3) {
            let cap = topology.node(id).expect("exists").capacity;
            let used = ResourceVector::new(
                rng.gen_range(0..=cap.cpu),
                rng.gen_range(0..=cap.mem),
                rng.gen_range(0..=cap.storage),
            );
            topology.reserve(id, &used).expect("within capacity");
        }
        if rng.gen_bool(0.1) {
            let _ = topology.node_down(id);
        }
    }

    let mut catalog = Catalog::new();
    let n_apps = rng.gen_range(1..=3);
    for a in 0..n_apps {
        let demand = ResourceVector::new(
            rng.gen_range(1..=40) * 100,
            rng.gen_range(1..=32) * 256,
            rng.gen_range(0..=16) * 1024,
        );
        let latency = rng.gen_bool(0.6).then(|| rng.gen_range(1..=60));
        let mut spec = AppSpec::data_app(format!("app{a}"), demand, latency, rng.gen_range(1..=20) as f64, 10.0);
        if rng.gen_bool(0.3) {
            spec.allowed_tiers = BTreeSet::from([*[Tier::EdgeModule, Tier::CentralCloud]
                .choose(&mut rng)
                .expect("non-empty")]);
        }
        catalog.register_app(spec).expect("fresh id");
    }
    let requests = (0..rng.gen_range(1..=max_requests.max(1)))
        .map(|_| {
            PlacementRequest::new(
                AppId::new(format!("app{}", rng.gen_range(0..n_apps))),
                ids[rng.gen_range(0..n)].clone(),
                rng.gen_range(1..=3),
            )
        })
        .collect();
    PlacementCase {
        topology,
        catalog,
        requests,
    }
}

/// A small, valid, end-to-end scenario: one cloud, edge modules, gateways,
/// wandering devices, Data-App deployments with scaling and an optional fault.
pub fn scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration_ms = 20_000;
    let n_edges = rng.gen_range(1..=3);
    let n_gws = rng.gen_range(1..=3);
    let mut nodes = vec![NodeDef {
        id: "cloud".into(),
        tier: Tier::CentralCloud,
        cpu: None,
        mem_mb: None,
        storage_mb: None,
    }];
    let mut links = Vec::new();
    for e in 0..n_edges {
        let id = NodeId::new(format!("edge{e}"));
        nodes.push(NodeDef {
            id: id.clone(),
            tier: Tier::EdgeModule,
            cpu: Some(rng.gen_range(2..=8) * 1000),
            mem_mb: Some(rng.gen_range(4..=16) * 1024),
            storage_mb: None,
        });
        links.push(LinkDef {
            id: None,
            a: id,
            b: "cloud".into(),
            latency_ms: rng.gen_range(10..=40),
            bandwidth_mbps: rng.gen_range(50..=1000),
        });
    }
    for g in 0..n_gws {
        let id = NodeId::new(format!("gw{g}"));
        nodes.push(NodeDef {
            id: id.clone(),
            tier: Tier::Gateway,
            cpu: None,
            mem_mb: None,
            storage_mb: None,
        });
        links.push(LinkDef {
            id: None,
            a: id,
            b: NodeId::new(format!("edge{}", rng.gen_range(0..n_edges))),
            latency_ms: rng.gen_range(1..=5),
            bandwidth_mbps: rng.gen_range(10..=200),
        });
    }
    if n_edges > 1 {
        links.push(LinkDef {
            id: None,
            a: "edge0".into(),
            b: "edge1".into(),
            latency_ms: rng.gen_range(2..=10),
            bandwidth_mbps: rng.gen_range(100..=1000),
        });
    }
    let apps = vec![
        AppDef {
            id: "sensor-app".into(),
            kind: AppKind::IotApp,
            cpu: 100,
            mem_mb: rng.gen_range(32..=128),
            storage_mb: 0,
            latency_ms: None,
            aggregation_factor: None,
            state_mb: rng.gen_range(1..=4) as f64,
            allowed_tiers: None,
        },
        AppDef {
            id: "analytics".into(),
            kind: AppKind::DataApp,
            cpu: rng.gen_range(2..=10) * 100,
            mem_mb: rng.gen_range(1..=4) * 512,
            storage_mb: 0,
            latency_ms: Some(rng.gen_range(5..=50)),
            aggregation_factor: Some(rng.gen_range(1..=20) as f64),
            state_mb: rng.gen_range(5..=50) as f64,
            allowed_tiers: None,
        },
    ];
    let devices = vec![DeviceDef {
        model: "sensor".into(),
        os_version: "1.0".into(),
        protocol: crate::catalog::Protocol::Zigbee,
        data_rate_kbps: rng.gen_range(8..=512),
        iot_app: "sensor-app".into(),
    }];
    let firmware = vec![FirmwareDef {
        model: "sensor".into(),
        os_version: "1.0".into(),
        version: format!("1.{}", rng.gen_range(0..10)),
    }];

    let gw = |rng: &mut ChaCha8Rng| NodeId::new(format!("gw{}", rng.gen_range(0..n_gws)));
    let mut script = Vec::new();
    for d in 0..rng.gen_range(1..=4) {
        let device = DeviceId::new(format!("d{d}"));
        script.push(ScriptStep::Attach {
            at_ms: rng.gen_range(0..5_000),
            device: device.clone(),
            gateway: gw(&mut rng),
            model: "sensor".into(),
            os_version: None,
            preferences: Default::default(),
            jitter_ms: rng.gen_range(0..=500),
        });
        if rng.gen_bool(0.5) {
            script.push(ScriptStep::Roam {
                at_ms: rng.gen_range(6_000..15_000),
                device,
                gateway: gw(&mut rng),
            });
        }
    }
    for i in 0..rng.gen_range(0..=2) {
        let instance = InstanceId::new(format!("analytics-{i}"));
        script.push(ScriptStep::Deploy {
            at_ms: rng.gen_range(0..3_000),
            instance: instance.clone(),
            app: "analytics".into(),
            source: gw(&mut rng),
            replicas: rng.gen_range(1..=3),
        });
        if rng.gen_bool(0.5) {
            script.push(ScriptStep::Scale {
                at_ms: rng.gen_range(5_000..12_000),
                instance,
                replicas: rng.gen_range(1..=8),
            });
        }
    }
    if rng.gen_bool(0.3) {
        script.push(ScriptStep::Fault {
            at_ms: rng.gen_range(2_000..10_000),
            kind: FaultKind::CloudPartition,
            target: "cloud".into(),
            duration_ms: rng.gen_range(1_000..8_000),
        });
    }

    Scenario {
        schema_version: SCHEMA_VERSION,
        name: format!("random-{seed}"),
        seed,
        duration_ms,
        scheduler_tick_ms: 1_000,
        flow_tick_ms: 100,
        metrics_window_ms: 5_000,
        buffer_mb: rng.gen_range(1..=10) as f64,
        thresholds: Some(ThresholdDef { high: 0.8, low: 0.6 }),
        nodes,
        links,
        apps,
        devices,
        firmware,
        script,
    }
}
