//! Declarative run descriptions.
//!
//! A scenario is a TOML document (`schema_version = 1`) listing the
//! topology, the catalog, run parameters and a script of timed events.
//! Loading validates every reference and invariant up front so a loaded
//! scenario never fails on a dangling id mid-run.
//!
//! ```toml
//! schema_version = 1
//! name = "demo"
//! seed = 7
//! duration_ms = 30000
//!
//! [[nodes]]
//! id = "gw1"
//! tier = "gateway"
//!
//! [[script]]
//! type = "attach"
//! at_ms = 1000
//! device = "w1"
//! gateway = "gw1"
//! model = "wristband"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AppKind, AppSpec, Catalog, CatalogError, DeviceProfile, FirmwareEntry, FirmwareVersion, Protocol};
use crate::ids::{AppId, DeviceId, InstanceId, LinkId, NodeId};
use crate::kernel::{EventKind, Fault, FaultKind, Simulation, Workload};
use crate::platform::{Platform, RunConfig};
use crate::report::{report_from_trace, Report};
use crate::scheduler::Thresholds;
use crate::topology::{Node, ResourceVector, Tier, Topology, TopologyError};
use crate::trace::Trace;
use crate::SimTime;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("unknown {kind} `{id}`")]
    UnknownReference { kind: &'static str, id: String },
    #[error("invalid scenario: {0}")]
    InvariantViolation(String),
}

impl ScenarioError {
    fn unknown(kind: &'static str, id: impl ToString) -> Self {
        ScenarioError::UnknownReference {
            kind,
            id: id.to_string(),
        }
    }

    fn invalid(msg: impl ToString) -> Self {
        ScenarioError::InvariantViolation(msg.to_string())
    }
}

impl From<TopologyError> for ScenarioError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::UnknownNode(n) => ScenarioError::unknown("node", n),
            TopologyError::UnknownLink(l) => ScenarioError::unknown("link", l),
            other => ScenarioError::invalid(other),
        }
    }
}

impl From<CatalogError> for ScenarioError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::UnknownApp(a) | CatalogError::DanglingAppReference { app: a, .. } => {
                ScenarioError::unknown("app", a)
            }
            CatalogError::UnknownProfile(m) => ScenarioError::unknown("device model", m),
            other => ScenarioError::invalid(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub id: NodeId,
    pub tier: Tier,
    /// Millicores.
    pub cpu: Option<u64>,
    pub mem_mb: Option<u64>,
    pub storage_mb: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDef {
    /// Generated as `a~b` when omitted.
    pub id: Option<LinkId>,
    pub a: NodeId,
    pub b: NodeId,
    pub latency_ms: u64,
    pub bandwidth_mbps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppDef {
    pub id: AppId,
    pub kind: AppKind,
    /// Per-replica millicores.
    pub cpu: u64,
    pub mem_mb: u64,
    #[serde(default)]
    pub storage_mb: u64,
    pub latency_ms: Option<u64>,
    pub aggregation_factor: Option<f64>,
    #[serde(default)]
    pub state_mb: f64,
    /// Defaults to gateways for IoT apps, edge and cloud for Data-Apps.
    pub allowed_tiers: Option<BTreeSet<Tier>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDef {
    pub model: String,
    pub os_version: String,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    pub data_rate_kbps: u64,
    pub iot_app: AppId,
}

fn default_protocol() -> Protocol {
    Protocol::Ble
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirmwareDef {
    pub model: String,
    pub os_version: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdDef {
    pub high: f64,
    pub low: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptStep {
    Attach {
        at_ms: SimTime,
        device: DeviceId,
        gateway: NodeId,
        model: String,
        /// Defaults to the profile's OS version.
        os_version: Option<String>,
        #[serde(default)]
        preferences: BTreeMap<String, String>,
        /// Uniform random delay in `[0, jitter_ms]` drawn from the run's seed.
        #[serde(default)]
        jitter_ms: SimTime,
    },
    Detach {
        at_ms: SimTime,
        device: DeviceId,
        gateway: NodeId,
    },
    Roam {
        at_ms: SimTime,
        device: DeviceId,
        gateway: NodeId,
    },
    Deploy {
        at_ms: SimTime,
        instance: InstanceId,
        app: AppId,
        source: NodeId,
        #[serde(default = "one")]
        replicas: u32,
    },
    Scale {
        at_ms: SimTime,
        instance: InstanceId,
        replicas: u32,
    },
    DataRate {
        at_ms: SimTime,
        device: DeviceId,
        kbps: u64,
    },
    Fault {
        at_ms: SimTime,
        kind: FaultKind,
        target: String,
        duration_ms: SimTime,
    },
}

fn one() -> u32 {
    1
}

impl ScriptStep {
    pub fn at_ms(&self) -> SimTime {
        match self {
            ScriptStep::Attach { at_ms, .. }
            | ScriptStep::Detach { at_ms, .. }
            | ScriptStep::Roam { at_ms, .. }
            | ScriptStep::Deploy { at_ms, .. }
            | ScriptStep::Scale { at_ms, .. }
            | ScriptStep::DataRate { at_ms, .. }
            | ScriptStep::Fault { at_ms, .. } => *at_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: SimTime,
    #[serde(default = "default_scheduler_tick")]
    pub scheduler_tick_ms: SimTime,
    #[serde(default = "default_flow_tick")]
    pub flow_tick_ms: SimTime,
    #[serde(default = "default_window")]
    pub metrics_window_ms: SimTime,
    #[serde(default = "default_buffer")]
    pub buffer_mb: f64,
    pub thresholds: Option<ThresholdDef>,
    #[serde(default)]
    pub nodes: Vec<NodeDef>,
    #[serde(default)]
    pub links: Vec<LinkDef>,
    #[serde(default)]
    pub apps: Vec<AppDef>,
    #[serde(default)]
    pub devices: Vec<DeviceDef>,
    #[serde(default)]
    pub firmware: Vec<FirmwareDef>,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

fn default_scheduler_tick() -> SimTime {
    1_000
}
fn default_flow_tick() -> SimTime {
    100
}
fn default_window() -> SimTime {
    10_000
}
fn default_buffer() -> f64 {
    10.0
}

/// A validated scenario with its world already built.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    pub config: RunConfig,
    pub topology: Topology,
    pub catalog: Catalog,
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Loaded, ScenarioError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.as_ref().display())))?;
    from_toml_str(&text)
}

pub fn from_toml_str(text: &str) -> Result<Loaded, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    validate(scenario)
}

/// Checks every reference and invariant and builds the initial world.
pub fn validate(scenario: Scenario) -> Result<Loaded, ScenarioError> {
    if scenario.schema_version != SCHEMA_VERSION {
        return Err(ScenarioError::invalid(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            scenario.schema_version
        )));
    }
    if scenario.scheduler_tick_ms == 0 || scenario.flow_tick_ms == 0 {
        return Err(ScenarioError::invalid("tick intervals must be positive"));
    }
    if scenario.metrics_window_ms == 0 || !scenario.metrics_window_ms.is_multiple_of(scenario.flow_tick_ms) {
        return Err(ScenarioError::invalid(
            "metrics_window_ms must be a positive multiple of flow_tick_ms",
        ));
    }
    if !(scenario.buffer_mb.is_finite() && scenario.buffer_mb >= 0.0) {
        return Err(ScenarioError::invalid("buffer_mb must be non-negative"));
    }
    let thresholds = match scenario.thresholds {
        None => Thresholds::default(),
        Some(t) => Thresholds::new(t.high, t.low).map_err(ScenarioError::invalid)?,
    };

    let mut topology = Topology::new();
    for n in &scenario.nodes {
        let d = n.tier.default_capacity();
        let capacity = ResourceVector::new(
            n.cpu.unwrap_or(d.cpu),
            n.mem_mb.unwrap_or(d.mem),
            n.storage_mb.unwrap_or(d.storage),
        );
        topology.add_node(Node::new(n.id.clone(), n.tier, capacity))?;
    }
    for l in &scenario.links {
        match &l.id {
            Some(id) => topology.insert_link(id.clone(), &l.a, &l.b, l.latency_ms, l.bandwidth_mbps)?,
            None => topology.add_link(&l.a, &l.b, l.latency_ms, l.bandwidth_mbps)?,
        };
    }

    let mut catalog = Catalog::new();
    for a in &scenario.apps {
        let demand = ResourceVector::new(a.cpu, a.mem_mb, a.storage_mb);
        let mut spec = match a.kind {
            AppKind::IotApp => AppSpec::iot_app(a.id.clone(), demand, a.state_mb),
            AppKind::DataApp => AppSpec::data_app(
                a.id.clone(),
                demand,
                a.latency_ms,
                a.aggregation_factor.unwrap_or(1.0),
                a.state_mb,
            ),
        };
        if a.kind == AppKind::IotApp {
            spec.latency_requirement_ms = a.latency_ms;
            if let Some(f) = a.aggregation_factor {
                spec.aggregation_factor = f;
            }
        }
        if let Some(tiers) = &a.allowed_tiers {
            spec.allowed_tiers = tiers.clone();
        }
        catalog.register_app(spec)?;
    }
    for d in &scenario.devices {
        catalog.register_profile(DeviceProfile {
            model: d.model.clone(),
            os_version: d.os_version.clone(),
            protocol: d.protocol,
            data_rate_kbps: d.data_rate_kbps,
            iot_app: d.iot_app.clone(),
        })?;
    }
    for f in &scenario.firmware {
        let version: FirmwareVersion = f.version.parse().map_err(ScenarioError::invalid)?;
        catalog.register_firmware(FirmwareEntry {
            model: f.model.clone(),
            os_version: f.os_version.clone(),
            firmware_version: version,
        })?;
    }

    check_script(&scenario, &topology, &catalog)?;

    let config = RunConfig {
        name: scenario.name.clone(),
        seed: scenario.seed,
        duration_ms: scenario.duration_ms,
        scheduler_tick_ms: scenario.scheduler_tick_ms,
        flow_tick_ms: scenario.flow_tick_ms,
        metrics_window_ms: scenario.metrics_window_ms,
        buffer_mb: scenario.buffer_mb,
        thresholds,
    };
    Ok(Loaded {
        scenario,
        config,
        topology,
        catalog,
    })
}

fn check_gateway(topology: &Topology, id: &NodeId) -> Result<(), ScenarioError> {
    let node = topology.node(id)?;
    if node.tier != Tier::Gateway {
        return Err(ScenarioError::invalid(format!("`{id}` is not a gateway")));
    }
    Ok(())
}

fn check_script(scenario: &Scenario, topology: &Topology, catalog: &Catalog) -> Result<(), ScenarioError> {
    let mut devices: BTreeSet<&DeviceId> = BTreeSet::new();
    let mut instances: BTreeSet<&InstanceId> = BTreeSet::new();
    let mut steps: Vec<&ScriptStep> = scenario.script.iter().collect();
    steps.sort_by_key(|s| s.at_ms());
    for step in steps {
        if step.at_ms() > scenario.duration_ms {
            return Err(ScenarioError::invalid(format!(
                "script step at {} ms is past duration_ms {}",
                step.at_ms(),
                scenario.duration_ms
            )));
        }
        match step {
            ScriptStep::Attach {
                device,
                gateway,
                model,
                os_version,
                jitter_ms,
                at_ms,
                ..
            } => {
                check_gateway(topology, gateway)?;
                let profile = catalog.profile(model)?;
                if os_version.as_ref().is_some_and(|v| v.trim().is_empty()) || profile.os_version.is_empty() {
                    return Err(ScenarioError::invalid(format!("empty os_version for `{device}`")));
                }
                if at_ms + jitter_ms > scenario.duration_ms {
                    return Err(ScenarioError::invalid(format!(
                        "attach of `{device}` may fall past duration_ms"
                    )));
                }
                devices.insert(device);
            }
            ScriptStep::Detach { device, gateway, .. } | ScriptStep::Roam { device, gateway, .. } => {
                check_gateway(topology, gateway)?;
                if !devices.contains(device) {
                    return Err(ScenarioError::unknown("device", device));
                }
            }
            ScriptStep::Deploy {
                instance,
                app,
                source,
                replicas,
                ..
            } => {
                let spec = catalog.app(app)?;
                if spec.kind != AppKind::DataApp {
                    return Err(ScenarioError::invalid(format!("`{app}` is not a data app")));
                }
                topology.node(source)?;
                if *replicas == 0 {
                    return Err(ScenarioError::invalid("replicas must be positive"));
                }
                if !instances.insert(instance) {
                    return Err(ScenarioError::invalid(format!("instance `{instance}` deployed twice")));
                }
            }
            ScriptStep::Scale { instance, replicas, .. } => {
                if !instances.contains(instance) {
                    return Err(ScenarioError::unknown("instance", instance));
                }
                if *replicas == 0 {
                    return Err(ScenarioError::invalid("replicas must be positive"));
                }
            }
            ScriptStep::DataRate { device, .. } => {
                if !devices.contains(device) {
                    return Err(ScenarioError::unknown("device", device));
                }
            }
            ScriptStep::Fault {
                kind,
                target,
                duration_ms,
                ..
            } => {
                if *duration_ms == 0 {
                    return Err(ScenarioError::invalid("fault duration must be positive"));
                }
                match kind {
                    FaultKind::LinkDown => {
                        topology.link(&LinkId::new(target.as_str()))?;
                    }
                    FaultKind::NodeDown => {
                        topology.node(&NodeId::new(target.as_str()))?;
                    }
                    FaultKind::CloudPartition => {
                        let node = topology.node(&NodeId::new(target.as_str()))?;
                        if node.tier != Tier::CentralCloud {
                            return Err(ScenarioError::invalid(format!(
                                "partition target `{target}` is not a central cloud node"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

impl Loaded {
    /// No nodes and no script: nothing to simulate.
    pub fn is_empty(&self) -> bool {
        self.scenario.nodes.is_empty() && self.scenario.script.is_empty()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.config.seed = seed;
        self
    }

    /// Builds the kernel with all initial and scripted events queued.
    pub fn simulation(&self) -> Simulation {
        let platform = Platform::new(self.config.clone(), self.topology.clone(), self.catalog.clone());
        let mut sim = Simulation::new(platform, self.config.seed);
        if self.is_empty() {
            return sim;
        }
        let mut preamble = Trace::new();
        sim.platform().emit_preamble(&mut preamble);
        *sim.trace_mut() = preamble;

        let queue = |sim: &mut Simulation, time, kind| {
            sim.schedule(time, kind).expect("validated times are never in the past");
        };
        if self.config.flow_tick_ms <= self.config.duration_ms {
            queue(&mut sim, self.config.flow_tick_ms, EventKind::FlowAdvance);
        }
        if self.config.scheduler_tick_ms <= self.config.duration_ms {
            queue(&mut sim, self.config.scheduler_tick_ms, EventKind::SchedulerTick);
        }
        for step in &self.scenario.script {
            let at = step.at_ms();
            let kind = match step.clone() {
                ScriptStep::Attach {
                    device,
                    gateway,
                    model,
                    os_version,
                    preferences,
                    jitter_ms,
                    ..
                } => {
                    let delay = if jitter_ms > 0 {
                        sim.rng_mut().gen_range(0..=jitter_ms)
                    } else {
                        0
                    };
                    let os_version = os_version.unwrap_or_else(|| {
                        self.catalog
                            .profile(&model)
                            .map(|p| p.os_version.clone())
                            .unwrap_or_default()
                    });
                    queue(
                        &mut sim,
                        at + delay,
                        EventKind::Attach {
                            device,
                            gateway,
                            model,
                            os_version,
                            preferences,
                        },
                    );
                    continue;
                }
                ScriptStep::Detach { device, gateway, .. } => EventKind::Detach { device, gateway },
                ScriptStep::Roam { device, gateway, .. } => EventKind::Roam { device, gateway },
                ScriptStep::Deploy {
                    instance,
                    app,
                    source,
                    replicas,
                    ..
                } => EventKind::WorkloadChange(Workload::Deploy {
                    instance,
                    app,
                    source,
                    replicas,
                }),
                ScriptStep::Scale { instance, replicas, .. } => {
                    EventKind::WorkloadChange(Workload::Scale { instance, replicas })
                }
                ScriptStep::DataRate { device, kbps, .. } => {
                    EventKind::WorkloadChange(Workload::DataRate { device, kbps })
                }
                ScriptStep::Fault {
                    kind,
                    target,
                    duration_ms,
                    ..
                } => {
                    sim.inject_fault(Fault {
                        kind,
                        target,
                        start: at,
                        duration: duration_ms,
                    })
                    .expect("validated fault");
                    continue;
                }
            };
            queue(&mut sim, at, kind);
        }
        sim
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub report: Report,
    pub platform: Platform,
}

/// Runs to `duration_ms`, or earlier when `until` is given.
pub fn run_scenario(loaded: &Loaded, until: Option<SimTime>) -> RunOutput {
    let end = until.map_or(loaded.config.duration_ms, |u| u.min(loaded.config.duration_ms));
    let empty = loaded.is_empty();
    let done = loaded.simulation().run(end);
    let mut trace = done.trace;
    if !empty {
        done.platform.emit_epilogue(&mut trace, end);
    }
    let report = report_from_trace(&trace).expect("a fresh trace is well formed");
    RunOutput {
        trace,
        report,
        platform: done.platform,
    }
}
