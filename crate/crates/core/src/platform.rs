//! World state of a run and the handlers the kernel dispatches to.
//!
//! Control-plane work (IoT-app installs, Data-App deployment, scaling,
//! threshold ticks, central status updates) needs the central controller.
//! While the cloud is cut off that work is queued and replayed in order once
//! it is reachable again. Data-plane work (flows, aggregation, migrations
//! already in flight) carries on at the edge.

use std::collections::BTreeMap;

use serde_json::json;

use crate::catalog::{AppKind, Catalog};
use crate::dataflow::{FlowTable, StepInput};
use crate::details;
use crate::discovery::{Discovery, InstallRequest};
use crate::ids::{DeviceId, InstanceId, LinkId, NodeId};
use crate::kernel::{EventKind, Fault, FaultKind, Workload};
use crate::migration::{InFlight, MigrationError, MigrationStart, Migrations};
use crate::scheduler::{
    Action, ApplyOutcome, InstallOutcome, InstanceStatus, PlacementRequest, Scheduler, Thresholds,
};
use crate::topology::{ResourceVector, Tier, Topology};
use crate::trace::{Details, Trace, TraceKind};
use crate::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub duration_ms: SimTime,
    pub scheduler_tick_ms: SimTime,
    pub flow_tick_ms: SimTime,
    pub metrics_window_ms: SimTime,
    pub buffer_mb: f64,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "unnamed".into(),
            seed: 0,
            duration_ms: 60_000,
            scheduler_tick_ms: 1_000,
            flow_tick_ms: 100,
            metrics_window_ms: 10_000,
            buffer_mb: 10.0,
            thresholds: Thresholds::default(),
        }
    }
}

/// Per-event handler context: the clock, the trace and follow-up events.
pub struct Ctx<'a> {
    pub now: SimTime,
    trace: &'a mut Trace,
    follow_ups: Vec<(SimTime, EventKind)>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: SimTime, trace: &'a mut Trace) -> Self {
        Self {
            now,
            trace,
            follow_ups: Vec::new(),
        }
    }

    pub fn emit(&mut self, kind: TraceKind, subject: impl Into<String>, details: Details) {
        self.trace.push(self.now, kind, subject, details);
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) {
        debug_assert!(time >= self.now);
        self.follow_ups.push((time, kind));
    }

    pub fn into_follow_ups(self) -> Vec<(SimTime, EventKind)> {
        self.follow_ups
    }
}

/// Work that needs the central controller.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Install(InstallRequest),
    Deploy {
        instance: InstanceId,
        request: PlacementRequest,
    },
    Scale {
        instance: InstanceId,
        replicas: u32,
    },
    StatusUpdate {
        instance: InstanceId,
        device: DeviceId,
        host: NodeId,
        state_version: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Install(_) => "install",
            Command::Deploy { .. } => "deploy",
            Command::Scale { .. } => "scale",
            Command::StatusUpdate { .. } => "status_update",
        }
    }

    fn subject(&self) -> String {
        match self {
            Command::Install(req) => req.device.to_string(),
            Command::Deploy { instance, .. }
            | Command::Scale { instance, .. }
            | Command::StatusUpdate { instance, .. } => instance.to_string(),
        }
    }
}

/// Where a device's data is delivered.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Sink {
    gateway: NodeId,
    node: NodeId,
    /// Serving Data-App, `None` for plain edge storage.
    instance: Option<InstanceId>,
}

#[derive(Debug, Clone)]
pub struct Platform {
    pub config: RunConfig,
    pub topology: Topology,
    pub catalog: Catalog,
    pub discovery: Discovery,
    pub scheduler: Scheduler,
    pub migrations: Migrations,
    pub flows: FlowTable,
    /// Aggregated results waiting at an edge module for a path to the cloud, in bits.
    outbox: BTreeMap<NodeId, f64>,
    rate_overrides: BTreeMap<DeviceId, u64>,
    partitions: u32,
    deferred_commands: Vec<Command>,
    deferred_ticks: u64,
}

impl Platform {
    pub fn new(config: RunConfig, topology: Topology, catalog: Catalog) -> Self {
        let thresholds = config.thresholds;
        let buffer_mb = config.buffer_mb;
        Self {
            config,
            topology,
            catalog,
            discovery: Discovery::new(),
            scheduler: Scheduler::new(thresholds),
            migrations: Migrations::new(),
            flows: FlowTable::new(buffer_mb),
            outbox: BTreeMap::new(),
            rate_overrides: BTreeMap::new(),
            partitions: 0,
            deferred_commands: Vec::new(),
            deferred_ticks: 0,
        }
    }

    /// The central controller is reachable: no partition is active and some
    /// cloud node (if the topology has any) is up.
    pub fn controller_available(&self) -> bool {
        if self.partitions > 0 {
            return false;
        }
        let mut clouds = self.topology.nodes_in_tier(Tier::CentralCloud).peekable();
        clouds.peek().is_none() || clouds.any(|n| n.is_up())
    }

    pub fn deferred_ticks(&self) -> u64 {
        self.deferred_ticks
    }

    pub fn deferred_commands(&self) -> &[Command] {
        &self.deferred_commands
    }

    pub fn outbox_bits(&self) -> f64 {
        self.outbox.values().fold(0.0, |a, b| a + b)
    }

    /// Records describing the run and its initial topology.
    pub fn emit_preamble(&self, trace: &mut Trace) {
        let c = &self.config;
        trace.push(
            0,
            TraceKind::RunStarted,
            c.name.clone(),
            details! {
                "seed" => c.seed,
                "duration_ms" => c.duration_ms,
                "scheduler_tick_ms" => c.scheduler_tick_ms,
                "flow_tick_ms" => c.flow_tick_ms,
                "metrics_window_ms" => c.metrics_window_ms,
                "buffer_bits" => self.flows.buffer_bits(),
                "high_watermark" => c.thresholds.high,
                "low_watermark" => c.thresholds.low,
            },
        );
        for node in self.topology.nodes() {
            trace.push(
                0,
                TraceKind::NodeRegistered,
                node.id.to_string(),
                details! {
                    "tier" => node.tier.as_str(),
                    "cpu" => node.capacity.cpu,
                    "mem" => node.capacity.mem,
                    "storage" => node.capacity.storage,
                },
            );
        }
        for link in self.topology.links() {
            trace.push(
                0,
                TraceKind::LinkRegistered,
                link.id.to_string(),
                details! {
                    "a" => link.a.as_str(),
                    "b" => link.b.as_str(),
                    "latency_ms" => link.latency_ms,
                    "bandwidth_mbps" => link.bandwidth_mbps,
                },
            );
        }
    }

    /// Final record: per-device flow counters and per-node allocations.
    pub fn emit_epilogue(&self, trace: &mut Trace, time: SimTime) {
        let flows: serde_json::Map<String, serde_json::Value> = self
            .flows
            .flows()
            .map(|f| {
                (
                    f.device.to_string(),
                    json!({
                        "generated": f.generated,
                        "delivered": f.delivered,
                        "dropped": f.dropped,
                        "buffered": f.buffered,
                    }),
                )
            })
            .collect();
        let alloc: serde_json::Map<String, serde_json::Value> = self
            .topology
            .nodes()
            .map(|n| {
                (
                    n.id.to_string(),
                    json!({"cpu": n.alloc.cpu, "mem": n.alloc.mem, "storage": n.alloc.storage}),
                )
            })
            .collect();
        trace.push(
            time,
            TraceKind::RunFinished,
            self.config.name.clone(),
            details! {
                "flows" => flows,
                "alloc" => alloc,
                "outbox_bits" => self.outbox_bits(),
            },
        );
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, event: EventKind) {
        match event {
            EventKind::Attach {
                device,
                gateway,
                model,
                os_version,
                preferences,
            } => self.on_attach(ctx, &device, &gateway, &model, &os_version, preferences),
            EventKind::Detach { device, gateway } => self.on_detach(ctx, &device, &gateway),
            EventKind::Roam { device, gateway } => self.on_roam(ctx, &device, &gateway),
            EventKind::WorkloadChange(w) => self.on_workload(ctx, w),
            EventKind::SchedulerTick => {
                self.on_tick(ctx, false);
                let next = ctx.now + self.config.scheduler_tick_ms;
                if next <= self.config.duration_ms {
                    ctx.schedule(next, EventKind::SchedulerTick);
                }
            }
            EventKind::FlowAdvance => {
                self.on_flow_advance(ctx);
                let next = ctx.now + self.config.flow_tick_ms;
                if next <= self.config.duration_ms {
                    ctx.schedule(next, EventKind::FlowAdvance);
                }
            }
            EventKind::FaultStart(f) => self.on_fault(ctx, &f, true),
            EventKind::FaultEnd(f) => self.on_fault(ctx, &f, false),
            EventKind::MigrationComplete { instance } => self.on_migration_complete(ctx, &instance),
            EventKind::Custom { name, details } => ctx.emit(TraceKind::Custom, name, details),
        }
    }

    fn warn(ctx: &mut Ctx<'_>, subject: impl Into<String>, message: impl ToString) {
        ctx.emit(
            TraceKind::Warning,
            subject,
            details! {"message" => message.to_string()},
        );
    }

    fn emit_resources(ctx: &mut Ctx<'_>, kind: TraceKind, node: &NodeId, instance: &InstanceId, rv: ResourceVector) {
        ctx.emit(
            kind,
            node.to_string(),
            details! {
                "instance" => instance.as_str(),
                "cpu" => rv.cpu,
                "mem" => rv.mem,
                "storage" => rv.storage,
            },
        );
    }

    fn emit_status(&self, ctx: &mut Ctx<'_>, instance: &InstanceId) {
        if let Some(inst) = self.scheduler.instance(instance) {
            ctx.emit(
                TraceKind::InstanceStatus,
                instance.to_string(),
                details! {
                    "status" => inst.status.to_string(),
                    "host" => inst.host.as_str(),
                    "kind" => kind_str(inst.kind),
                },
            );
        }
    }

    fn reservation_of(&self, instance: &InstanceId) -> ResourceVector {
        self.scheduler
            .instance(instance)
            .and_then(|i| self.catalog.app(&i.app).ok().map(|app| i.reservation(app)))
            .unwrap_or_default()
    }

    // ---- discovery ---------------------------------------------------------

    fn on_attach(
        &mut self,
        ctx: &mut Ctx<'_>,
        device: &DeviceId,
        gateway: &NodeId,
        model: &str,
        os_version: &str,
        preferences: BTreeMap<String, String>,
    ) {
        let outcome = match self.discovery.handle_attach(
            &self.topology,
            &self.catalog,
            gateway,
            device,
            model,
            os_version,
            ctx.now,
            preferences,
        ) {
            Ok(o) => o,
            Err(e) => return Self::warn(ctx, device.as_str(), e),
        };
        ctx.emit(
            TraceKind::Attach,
            device.to_string(),
            details! {"gateway" => gateway.as_str(), "model" => model, "os_version" => os_version},
        );
        ctx.emit(
            TraceKind::FirmwareResolved,
            device.to_string(),
            details! {"firmware" => outcome.firmware.as_ref().map(|v| v.to_string())},
        );
        if let Some(req) = outcome.install_request {
            ctx.emit(
                TraceKind::InstallRequested,
                device.to_string(),
                details! {"gateway" => gateway.as_str(), "app" => req.app.as_str()},
            );
            self.submit(ctx, Command::Install(req));
        }
    }

    fn on_detach(&mut self, ctx: &mut Ctx<'_>, device: &DeviceId, gateway: &NodeId) {
        match self.discovery.handle_detach(gateway, device, ctx.now) {
            Ok(()) => ctx.emit(
                TraceKind::Detach,
                device.to_string(),
                details! {"gateway" => gateway.as_str()},
            ),
            Err(e) => Self::warn(ctx, device.as_str(), e),
        }
    }

    fn on_roam(&mut self, ctx: &mut Ctx<'_>, device: &DeviceId, gateway: &NodeId) {
        let Some(att) = self.discovery.attachment(device).cloned() else {
            return Self::warn(ctx, device.as_str(), format!("cannot roam unknown device `{device}`"));
        };
        if self.discovery.current_gateway(device) == Some(gateway) {
            return;
        }
        if self.discovery.current_gateway(device).is_some() {
            self.on_detach(ctx, device, &att.gateway);
        }
        self.on_attach(ctx, device, gateway, &att.model, &att.os_version, BTreeMap::new());
    }

    // ---- control plane -----------------------------------------------------

    fn submit(&mut self, ctx: &mut Ctx<'_>, cmd: Command) {
        if self.controller_available() {
            self.execute(ctx, cmd);
        } else {
            ctx.emit(
                TraceKind::CommandDeferred,
                cmd.subject(),
                details! {"command" => cmd.name()},
            );
            self.deferred_commands.push(cmd);
        }
    }

    fn execute(&mut self, ctx: &mut Ctx<'_>, cmd: Command) {
        match cmd {
            Command::Install(req) => self.install(ctx, req),
            Command::Deploy { instance, request } => {
                match self
                    .scheduler
                    .place_as(&mut self.topology, &self.catalog, instance.clone(), request)
                {
                    Ok(inst) => {
                        let (host, app, source, replicas) =
                            (inst.host.clone(), inst.app.clone(), inst.source.clone(), inst.replicas);
                        let rv = self.reservation_of(&instance);
                        Self::emit_resources(ctx, TraceKind::Reserve, &host, &instance, rv);
                        ctx.emit(
                            TraceKind::InstanceStarted,
                            instance.to_string(),
                            details! {
                                "app" => app.as_str(),
                                "kind" => "data_app",
                                "host" => host.as_str(),
                                "source" => source.as_str(),
                                "replicas" => replicas,
                            },
                        );
                    }
                    Err(e) => Self::warn(ctx, instance.as_str(), e),
                }
            }
            Command::Scale { instance, replicas } => {
                let Some(before) = self.scheduler.instance(&instance).cloned() else {
                    return Self::warn(ctx, instance.as_str(), format!("unknown instance `{instance}`"));
                };
                let old = self.reservation_of(&instance);
                match self
                    .scheduler
                    .scale(&mut self.topology, &self.catalog, &instance, replicas)
                {
                    Ok(()) => {
                        let new = self.reservation_of(&instance);
                        if let Some(up) = new.checked_sub(&old).filter(|d| !d.is_zero()) {
                            Self::emit_resources(ctx, TraceKind::Reserve, &before.host, &instance, up);
                        }
                        if let Some(down) = old.checked_sub(&new).filter(|d| !d.is_zero()) {
                            Self::emit_resources(ctx, TraceKind::Release, &before.host, &instance, down);
                        }
                        ctx.emit(
                            TraceKind::Scale,
                            instance.to_string(),
                            details! {
                                "host" => before.host.as_str(),
                                "from" => before.replicas,
                                "to" => replicas,
                            },
                        );
                    }
                    Err(e) => Self::warn(ctx, instance.as_str(), e),
                }
            }
            Command::StatusUpdate {
                instance,
                device,
                host,
                state_version,
            } => ctx.emit(
                TraceKind::CentralStatusUpdated,
                instance.to_string(),
                details! {
                    "device" => device.as_str(),
                    "host" => host.as_str(),
                    "state_version" => state_version,
                },
            ),
        }
    }

    fn install(&mut self, ctx: &mut Ctx<'_>, req: InstallRequest) {
        let device = req.device.clone();
        match self
            .scheduler
            .install_iot_app(&mut self.topology, &self.catalog, &req)
        {
            Ok(InstallOutcome::Installed(id)) => {
                let rv = self.reservation_of(&id);
                Self::emit_resources(ctx, TraceKind::Reserve, &req.gateway, &id, rv);
                ctx.emit(
                    TraceKind::InstanceStarted,
                    id.to_string(),
                    details! {
                        "app" => req.app.as_str(),
                        "kind" => "iot_app",
                        "host" => req.gateway.as_str(),
                        "device" => device.as_str(),
                    },
                );
                self.sync_flow(ctx, &device);
            }
            Ok(InstallOutcome::Existing(_)) => self.sync_flow(ctx, &device),
            Ok(InstallOutcome::Restarted(id)) => {
                let rv = self.reservation_of(&id);
                Self::emit_resources(ctx, TraceKind::Reserve, &req.gateway, &id, rv);
                self.emit_status(ctx, &id);
                self.sync_flow(ctx, &device);
            }
            Ok(InstallOutcome::NeedsRoam { .. }) => self.roam(ctx, &device, &req.gateway),
            Ok(InstallOutcome::InProgress(_)) => {}
            Err(e) => Self::warn(ctx, device.as_str(), e),
        }
    }

    fn roam(&mut self, ctx: &mut Ctx<'_>, device: &DeviceId, gateway: &NodeId) {
        let Some(prior) = self.scheduler.bound_instance(device).cloned() else {
            return Self::warn(ctx, device.as_str(), MigrationError::NoBoundApp(device.clone()));
        };
        let rv = self.reservation_of(&prior.id);
        match self.migrations.roam(
            &mut self.scheduler,
            &mut self.topology,
            &self.catalog,
            device,
            gateway,
            ctx.now,
        ) {
            Ok(MigrationStart::Started(flight)) => self.migration_started(ctx, &flight, rv),
            Ok(MigrationStart::Noop(_)) => {
                if prior.status == InstanceStatus::Stopped {
                    Self::emit_resources(ctx, TraceKind::Reserve, gateway, &prior.id, rv);
                    self.emit_status(ctx, &prior.id);
                }
                self.sync_flow(ctx, device);
            }
            Err(e @ MigrationError::TargetGatewayFull { .. }) => {
                if prior.status == InstanceStatus::Running {
                    Self::emit_resources(ctx, TraceKind::Release, &prior.host, &prior.id, rv);
                    self.emit_status(ctx, &prior.id);
                }
                Self::warn(ctx, device.as_str(), e);
            }
            Err(e) => Self::warn(ctx, device.as_str(), e),
        }
    }

    fn migration_started(&mut self, ctx: &mut Ctx<'_>, flight: &InFlight, rv: ResourceVector) {
        Self::emit_resources(ctx, TraceKind::Reserve, &flight.to, &flight.instance, rv);
        self.emit_status(ctx, &flight.instance);
        ctx.emit(
            TraceKind::MigrationStarted,
            flight.instance.to_string(),
            details! {
                "from" => flight.from.as_str(),
                "to" => flight.to.as_str(),
                "downtime_ms" => flight.downtime_ms(),
                "bytes_mb" => flight.snapshot.size_mb,
                "state_version" => flight.snapshot.version,
            },
        );
        ctx.schedule(
            flight.completes_at,
            EventKind::MigrationComplete {
                instance: flight.instance.clone(),
            },
        );
    }

    fn on_migration_complete(&mut self, ctx: &mut Ctx<'_>, instance: &InstanceId) {
        let Some(flight) = self.migrations.get(instance).cloned() else {
            return Self::warn(ctx, instance.as_str(), "completion for unknown migration");
        };
        let rv = self.reservation_of(instance);
        let record = match self.migrations.complete(
            &mut self.scheduler,
            &mut self.topology,
            &self.catalog,
            instance,
            ctx.now,
        ) {
            Ok(r) => r,
            Err(e) => return Self::warn(ctx, instance.as_str(), e),
        };
        if flight.source_reserved {
            Self::emit_resources(ctx, TraceKind::Release, &flight.from, instance, rv);
        }
        self.emit_status(ctx, instance);
        ctx.emit(
            TraceKind::MigrationCompleted,
            instance.to_string(),
            details! {
                "from" => record.from.as_str(),
                "to" => record.to.as_str(),
                "started_at" => record.started_at,
                "completed_at" => record.completed_at,
                "bytes_moved_mb" => record.bytes_moved_mb,
                "downtime_ms" => record.downtime_ms,
                "state_version" => record.state_version,
            },
        );

        let Some(inst) = self.scheduler.instance(instance).cloned() else {
            return;
        };
        let Some(device) = inst.bound_device.clone() else {
            return;
        };
        self.sync_flow(ctx, &device);
        self.submit(
            ctx,
            Command::StatusUpdate {
                instance: instance.clone(),
                device: device.clone(),
                host: inst.host.clone(),
                state_version: inst.state.version,
            },
        );
        // The device may have moved on while the app was in transit.
        if let Some(gw) = self.discovery.current_gateway(&device).cloned() {
            if gw != inst.host {
                let req = InstallRequest {
                    device: device.clone(),
                    gateway: gw,
                    app: inst.app.clone(),
                    preferences: BTreeMap::new(),
                };
                self.submit(ctx, Command::Install(req));
            }
        }
    }

    fn on_workload(&mut self, ctx: &mut Ctx<'_>, w: Workload) {
        match w {
            Workload::Deploy {
                instance,
                app,
                source,
                replicas,
            } => self.submit(
                ctx,
                Command::Deploy {
                    instance,
                    request: PlacementRequest {
                        app,
                        source,
                        replicas,
                    },
                },
            ),
            Workload::Scale { instance, replicas } => {
                self.submit(ctx, Command::Scale { instance, replicas })
            }
            Workload::DataRate { device, kbps } => {
                self.rate_overrides.insert(device.clone(), kbps);
                let _ = self.flows.set_rate(&device, kbps);
                ctx.emit(
                    TraceKind::Custom,
                    "data_rate",
                    details! {"device" => device.as_str(), "kbps" => kbps},
                );
            }
        }
    }

    fn on_tick(&mut self, ctx: &mut Ctx<'_>, replayed: bool) {
        if !replayed && !self.controller_available() {
            self.deferred_ticks += 1;
            ctx.emit(TraceKind::TickDeferred, "scheduler", details! {});
            return;
        }
        let util: serde_json::Map<String, serde_json::Value> = self
            .topology
            .nodes_in_tier(Tier::EdgeModule)
            .map(|n| (n.id.to_string(), json!(n.utilization())))
            .collect();
        ctx.emit(
            if replayed {
                TraceKind::TickReplayed
            } else {
                TraceKind::SchedulerTick
            },
            "scheduler",
            details! {"edge_utilization" => util},
        );

        let actions =
            self.scheduler
                .check_thresholds(&self.topology, &self.catalog, &self.migrations, ctx.now);
        for action in actions {
            match &action {
                Action::Offload {
                    instance,
                    from,
                    target,
                    ..
                } => ctx.emit(
                    TraceKind::OffloadDecided,
                    instance.to_string(),
                    details! {"from" => from.as_str(), "target" => target.as_str()},
                ),
                Action::Defer {
                    node,
                    instance,
                    reason,
                } => ctx.emit(
                    TraceKind::Defer,
                    node.to_string(),
                    details! {
                        "instance" => instance.as_ref().map(|i| i.to_string()),
                        "reason" => reason.to_string(),
                    },
                ),
            }
            let rv = match &action {
                Action::Offload { instance, .. } => self.reservation_of(instance),
                Action::Defer { .. } => ResourceVector::ZERO,
            };
            match self.scheduler.apply_action(
                &mut self.topology,
                &self.catalog,
                &mut self.migrations,
                &action,
                ctx.now,
            ) {
                Ok(ApplyOutcome::Migration(MigrationStart::Started(flight))) => {
                    self.migration_started(ctx, &flight, rv)
                }
                Ok(_) => {}
                Err(e) => {
                    let subject = match &action {
                        Action::Offload { instance, .. } => instance.to_string(),
                        Action::Defer { node, .. } => node.to_string(),
                    };
                    ctx.emit(
                        TraceKind::ActionStale,
                        subject,
                        details! {"message" => e.to_string()},
                    );
                }
            }
        }
    }

    fn on_fault(&mut self, ctx: &mut Ctx<'_>, fault: &Fault, starting: bool) {
        let result = match fault.kind {
            FaultKind::LinkDown => {
                let id = LinkId::new(fault.target.as_str());
                if starting {
                    self.topology.link_down(&id)
                } else {
                    self.topology.link_up(&id)
                }
            }
            FaultKind::NodeDown => {
                let id = NodeId::new(fault.target.as_str());
                if starting {
                    self.topology.node_down(&id)
                } else {
                    self.topology.node_up(&id)
                }
            }
            FaultKind::CloudPartition => {
                let id = NodeId::new(fault.target.as_str());
                let mut res = Ok(());
                for link in self.topology.incident_links(&id) {
                    res = if starting {
                        self.topology.link_down(&link)
                    } else {
                        self.topology.link_up(&link)
                    };
                }
                if starting {
                    self.partitions += 1;
                } else {
                    self.partitions = self.partitions.saturating_sub(1);
                }
                res
            }
        };
        if let Err(e) = result {
            return Self::warn(ctx, fault.target.as_str(), e);
        }
        ctx.emit(
            if starting {
                TraceKind::FaultStart
            } else {
                TraceKind::FaultEnd
            },
            fault.target.clone(),
            details! {
                "fault" => fault.kind.as_str(),
                "start" => fault.start,
                "duration_ms" => fault.duration,
            },
        );
        if !starting && self.controller_available() {
            self.replay_deferred(ctx);
        }
    }

    fn replay_deferred(&mut self, ctx: &mut Ctx<'_>) {
        for cmd in std::mem::take(&mut self.deferred_commands) {
            ctx.emit(
                TraceKind::CommandReplayed,
                cmd.subject(),
                details! {"command" => cmd.name()},
            );
            self.execute(ctx, cmd);
        }
        let ticks = std::mem::take(&mut self.deferred_ticks);
        for _ in 0..ticks {
            self.on_tick(ctx, true);
        }
    }

    // ---- data plane --------------------------------------------------------

    fn rate_of(&self, device: &DeviceId) -> Option<u64> {
        if let Some(r) = self.rate_overrides.get(device) {
            return Some(*r);
        }
        let att = self.discovery.attachment(device)?;
        self.catalog.profile(&att.model).ok().map(|p| p.data_rate_kbps)
    }

    /// Current delivery target for a device's data, if the data can flow:
    /// the device is attached, its IoT app runs on that gateway, and a
    /// serving sink exists.
    ///
    /// The sink is the running Data-App sourced at the gateway with the
    /// smallest id. If such apps exist but none is running (for instance all
    /// migrating) nothing is delivered. Without any, data goes to the nearest
    /// reachable edge module for storage.
    fn resolve_sink(&self, device: &DeviceId) -> Option<Sink> {
        let gateway = self.discovery.current_gateway(device)?;
        let iot = self.scheduler.bound_instance(device)?;
        if iot.status != InstanceStatus::Running || &iot.host != gateway {
            return None;
        }
        let mut sourced = self
            .scheduler
            .instances()
            .filter(|i| i.kind == AppKind::DataApp && &i.source == gateway)
            .peekable();
        if sourced.peek().is_some() {
            let running = sourced.find(|i| i.status == InstanceStatus::Running)?;
            return Some(Sink {
                gateway: gateway.clone(),
                node: running.host.clone(),
                instance: Some(running.id.clone()),
            });
        }
        self.topology
            .nodes_in_tier(Tier::EdgeModule)
            .filter(|n| n.is_up())
            .filter_map(|n| {
                self.topology
                    .path_latency(gateway, &n.id)
                    .ok()
                    .map(|lat| (lat, n.id.clone()))
            })
            .min()
            .map(|(_, node)| Sink {
                gateway: gateway.clone(),
                node,
                instance: None,
            })
    }

    /// Opens the device's flow, or rebinds it when its gateway or sink changed.
    fn sync_flow(&mut self, ctx: &mut Ctx<'_>, device: &DeviceId) {
        let Some(sink) = self.resolve_sink(device) else {
            return;
        };
        let Some(rate) = self.rate_of(device) else {
            return;
        };
        let previous = self.flows.flow(device).map(|f| (f.from.clone(), f.to.clone()));
        if previous.as_ref() == Some(&(sink.gateway.clone(), sink.node.clone())) {
            return;
        }
        if self
            .flows
            .open_flow(
                &self.discovery,
                &self.topology,
                device,
                &sink.gateway,
                &sink.node,
                rate,
            )
            .is_err()
        {
            return;
        }
        ctx.emit(
            if previous.is_some() {
                TraceKind::FlowRebound
            } else {
                TraceKind::FlowOpened
            },
            device.to_string(),
            details! {
                "from" => sink.gateway.as_str(),
                "to" => sink.node.as_str(),
                "rate_kbps" => rate,
                "instance" => sink.instance.as_ref().map(|i| i.to_string()),
            },
        );
    }

    fn on_flow_advance(&mut self, ctx: &mut Ctx<'_>) {
        let dt = self.config.flow_tick_ms;
        let from_ms = ctx.now.saturating_sub(dt);
        let devices: Vec<DeviceId> = self.flows.flows().map(|f| f.device.clone()).collect();

        let mut inputs = Vec::with_capacity(devices.len());
        let mut sinks: BTreeMap<DeviceId, Sink> = BTreeMap::new();
        for device in &devices {
            self.sync_flow(ctx, device);
            let sink = self.resolve_sink(device);
            let route = sink.as_ref().and_then(|s| {
                self.topology
                    .route(&s.gateway, &s.node)
                    .ok()
                    .map(|r| r.links)
            });
            if let (Some(s), Some(_)) = (&sink, &route) {
                sinks.insert(device.clone(), s.clone());
            }
            inputs.push(StepInput {
                device: device.clone(),
                generating: self.discovery.current_gateway(device).is_some(),
                route,
            });
        }

        let deltas = self.flows.advance_all(&self.topology, &inputs, dt);
        let mut cloud_arrivals: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (delta, input) in deltas.iter().zip(&inputs) {
            if delta.generated == 0 && delta.delivered == 0 && delta.dropped == 0 {
                continue;
            }
            let sink = sinks.get(&delta.device);
            ctx.emit(
                TraceKind::FlowAdvance,
                delta.device.to_string(),
                details! {
                    "from_ms" => from_ms,
                    "generated" => delta.generated,
                    "delivered" => delta.delivered,
                    "dropped" => delta.dropped,
                    "buffered" => delta.buffered,
                    "links" => input.route.clone().unwrap_or_default(),
                    "sink" => sink.map(|s| s.node.to_string()),
                },
            );
            if delta.delivered == 0 {
                continue;
            }
            let Some(sink) = sink else { continue };

            if let Some(iot) = self
                .scheduler
                .bound_instance(&delta.device)
                .map(|i| i.id.clone())
            {
                if let Some(inst) = self.scheduler.instance_mut(&iot) {
                    let total = self.flows.flow(&delta.device).map_or(0, |f| f.delivered);
                    inst.state.set("forwarded_bits", total.to_string());
                }
            }
            let Some(instance) = &sink.instance else {
                continue;
            };
            let Some(inst) = self.scheduler.instance(instance) else {
                continue;
            };
            let factor = self
                .catalog
                .app(&inst.app)
                .map_or(1.0, |a| a.aggregation_factor);
            let tier = self.topology.node(&sink.node).map(|n| n.tier).ok();
            match tier {
                Some(Tier::CentralCloud) => {
                    *cloud_arrivals.entry(sink.node.clone()).or_default() += delta.delivered as f64;
                }
                Some(_) => {
                    *self.outbox.entry(sink.node.clone()).or_default() +=
                        delta.delivered as f64 / factor;
                }
                None => {}
            }
            if let Some(inst) = self.scheduler.instance_mut(instance) {
                let seen: u64 = inst
                    .state
                    .payload
                    .get("ingested_bits")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(0);
                inst.state
                    .set("ingested_bits", (seen + delta.delivered).to_string());
            }
        }

        for (cloud, bits) in cloud_arrivals {
            ctx.emit(
                TraceKind::Uplink,
                cloud.to_string(),
                details! {"from_ms" => from_ms, "bits" => bits, "origin" => "raw"},
            );
        }
        let pending: Vec<(NodeId, f64)> = self
            .outbox
            .iter()
            .filter(|(_, b)| **b > 0.0)
            .map(|(n, b)| (n.clone(), *b))
            .collect();
        for (edge, bits) in pending {
            let reachable_cloud = self
                .topology
                .nodes_in_tier(Tier::CentralCloud)
                .filter(|c| c.is_up())
                .filter_map(|c| {
                    self.topology
                        .path_latency(&edge, &c.id)
                        .ok()
                        .map(|lat| (lat, c.id.clone()))
                })
                .min();
            if let Some((_, cloud)) = reachable_cloud {
                ctx.emit(
                    TraceKind::Uplink,
                    cloud.to_string(),
                    details! {"from_ms" => from_ms, "bits" => bits, "origin" => edge.as_str()},
                );
                self.outbox.insert(edge, 0.0);
            }
        }
    }
}

fn kind_str(kind: AppKind) -> &'static str {
    match kind {
        AppKind::IotApp => "iot_app",
        AppKind::DataApp => "data_app",
    }
}
