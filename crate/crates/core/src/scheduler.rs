//! The central orchestrator: placement, scaling and the threshold-driven
//! offload loop.
//!
//! Placement picks, among nodes of an allowed tier that are up, have room
//! for the whole replica set and meet the app's latency requirement from its
//! data source, the one with the lowest path latency. Ties go to the node
//! with the most free bottleneck capacity, then to the smallest node id.
//!
//! Offloading uses two watermarks. An edge module above `high` sheds data
//! apps, largest bottleneck reservation first, until it is at or below
//! `low`. Targets are chosen with the placement rule and must themselves
//! stay at or below `high` after the move, so a constant workload settles
//! instead of bouncing between nodes.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AppKind, AppSpec, Catalog};
use crate::discovery::InstallRequest;
use crate::ids::{AppId, DeviceId, InstanceId, NodeId};
use crate::migration::{MigrationError, MigrationStart, Migrations, StateBlob};
use crate::topology::{ResourceVector, Share, Tier, Topology};
use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("unknown app `{0}`")]
    UnknownApp(AppId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown instance `{0}`")]
    UnknownInstance(InstanceId),
    #[error("instance `{0}` already exists")]
    DuplicateInstance(InstanceId),
    #[error("replica count must be at least 1")]
    InvalidReplicas,
    #[error("app `{0}` has the wrong kind for this operation")]
    WrongAppKind(AppId),
    #[error("no feasible host for `{app}` near `{source_node}`")]
    Unschedulable { app: AppId, source_node: NodeId },
    #[error("gateway `{gateway}` has no room for `{app}`")]
    GatewayFull { gateway: NodeId, app: AppId },
    #[error("instance `{0}` is not running")]
    InstanceNotRunning(InstanceId),
    #[error("host `{host}` cannot fit scaling `{instance}` to {replicas} replicas")]
    InsufficientCapacity {
        instance: InstanceId,
        host: NodeId,
        replicas: u32,
    },
    #[error("stale action: {0}")]
    StaleAction(String),
    #[error("invalid thresholds: need 0 < low < high <= 1, got low={low} high={high}")]
    InvalidThresholds { low: f64, high: f64 },
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Pending,
    Running,
    Migrating,
    Stopped,
}

impl fmt::Display for InstanceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstanceStatus::Pending => "pending",
            InstanceStatus::Running => "running",
            InstanceStatus::Migrating => "migrating",
            InstanceStatus::Stopped => "stopped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppInstance {
    pub id: InstanceId,
    pub app: AppId,
    pub kind: AppKind,
    pub host: NodeId,
    /// Where the app's data comes from; latency requirements are measured
    /// from here.
    pub source: NodeId,
    pub replicas: u32,
    pub bound_device: Option<DeviceId>,
    pub state: StateBlob,
    pub status: InstanceStatus,
    /// Destination while `Migrating`.
    pub migration_target: Option<NodeId>,
}

impl AppInstance {
    /// Resources held on the host: replicas x per-replica demand.
    pub fn reservation(&self, app: &AppSpec) -> ResourceVector {
        app.demand
            .checked_mul(u64::from(self.replicas))
            .expect("reservation overflow")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub high: f64,
    pub low: f64,
}

impl Thresholds {
    pub fn new(high: f64, low: f64) -> Result<Self> {
        if !(low > 0.0 && low < high && high <= 1.0) {
            return Err(ScheduleError::InvalidThresholds { low, high });
        }
        Ok(Self { high, low })
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { high: 0.8, low: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub app: AppId,
    pub source: NodeId,
    pub replicas: u32,
}

impl PlacementRequest {
    pub fn new(app: impl Into<AppId>, source: impl Into<NodeId>, replicas: u32) -> Self {
        Self {
            app: app.into(),
            source: source.into(),
            replicas,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeferReason {
    NoFeasibleTarget,
    NoMovableInstance,
}

impl fmt::Display for DeferReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeferReason::NoFeasibleTarget => "no_feasible_target",
            DeferReason::NoMovableInstance => "no_movable_instance",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Offload {
        instance: InstanceId,
        from: NodeId,
        target: NodeId,
        /// Topology generation the decision was made against.
        generation: u64,
    },
    Defer {
        node: NodeId,
        instance: Option<InstanceId>,
        reason: DeferReason,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InstallOutcome {
    Installed(InstanceId),
    /// Already running on the requested gateway.
    Existing(InstanceId),
    /// Was stopped on this gateway and has been restarted.
    Restarted(InstanceId),
    /// Bound to the device but hosted on another gateway: it must roam.
    NeedsRoam { instance: InstanceId, from: NodeId },
    /// Currently migrating; the kernel re-checks the binding on completion.
    InProgress(InstanceId),
}

impl InstallOutcome {
    pub fn instance(&self) -> &InstanceId {
        match self {
            InstallOutcome::Installed(id)
            | InstallOutcome::Existing(id)
            | InstallOutcome::Restarted(id)
            | InstallOutcome::InProgress(id)
            | InstallOutcome::NeedsRoam { instance: id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApplyOutcome {
    Migration(MigrationStart),
    Deferred,
}

/// Best host under the placement objective, or `None`.
///
/// `exclude` drops one node from consideration; `ceiling` additionally
/// requires the host's utilization after the reservation to stay at or
/// below that fraction.
pub fn select_host(
    topology: &Topology,
    app: &AppSpec,
    source: &NodeId,
    replicas: u32,
    exclude: Option<&NodeId>,
    ceiling: Option<f64>,
) -> Option<(NodeId, u64)> {
    let demand = app.demand.checked_mul(u64::from(replicas))?;
    topology
        .nodes()
        .filter(|n| app.allows(n.tier) && n.is_up() && Some(&n.id) != exclude)
        .filter(|n| topology.can_fit(&n.id, &demand))
        .filter_map(|n| {
            let latency = topology.path_latency(source, &n.id).ok()?;
            if app.latency_requirement_ms.is_some_and(|req| latency > req) {
                return None;
            }
            if let Some(ceiling) = ceiling {
                let after = (n.alloc + demand).bottleneck_share(&n.capacity);
                if after.as_f64() > ceiling {
                    return None;
                }
            }
            Some((latency, Reverse(n.free_share()), n.id.clone()))
        })
        .min_by(|a, b| a.cmp(b))
        .map(|(latency, _, id)| (id, latency))
}

#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    instances: BTreeMap<InstanceId, AppInstance>,
    thresholds: Thresholds,
    next_serial: u64,
}

impl Scheduler {
    pub fn new(thresholds: Thresholds) -> Self {
        Self {
            instances: BTreeMap::new(),
            thresholds,
            next_serial: 0,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&AppInstance> {
        self.instances.get(id)
    }

    pub fn instance_mut(&mut self, id: &InstanceId) -> Option<&mut AppInstance> {
        self.instances.get_mut(id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &AppInstance> {
        self.instances.values()
    }

    pub fn instances_on<'a>(&'a self, node: &'a NodeId) -> impl Iterator<Item = &'a AppInstance> {
        self.instances.values().filter(move |i| &i.host == node)
    }

    /// The IoT-app instance bound to a device, if any.
    pub fn bound_instance(&self, device: &DeviceId) -> Option<&AppInstance> {
        self.instances
            .values()
            .find(|i| i.bound_device.as_ref() == Some(device))
    }

    /// Places a new instance under a generated id.
    pub fn place(
        &mut self,
        topology: &mut Topology,
        catalog: &Catalog,
        req: PlacementRequest,
    ) -> Result<&AppInstance> {
        let id = loop {
            self.next_serial += 1;
            let candidate = InstanceId::new(format!("{}#{}", req.app, self.next_serial));
            if !self.instances.contains_key(&candidate) {
                break candidate;
            }
        };
        self.place_as(topology, catalog, id, req)
    }

    pub fn place_as(
        &mut self,
        topology: &mut Topology,
        catalog: &Catalog,
        id: InstanceId,
        req: PlacementRequest,
    ) -> Result<&AppInstance> {
        if self.instances.contains_key(&id) {
            return Err(ScheduleError::DuplicateInstance(id));
        }
        if req.replicas == 0 {
            return Err(ScheduleError::InvalidReplicas);
        }
        let app = catalog
            .app(&req.app)
            .map_err(|_| ScheduleError::UnknownApp(req.app.clone()))?;
        if !topology.contains_node(&req.source) {
            return Err(ScheduleError::UnknownNode(req.source.clone()));
        }
        let (host, _) = select_host(topology, app, &req.source, req.replicas, None, None)
            .ok_or_else(|| ScheduleError::Unschedulable {
                app: req.app.clone(),
                source_node: req.source.clone(),
            })?;
        let instance = AppInstance {
            id: id.clone(),
            app: app.id.clone(),
            kind: app.kind,
            host: host.clone(),
            source: req.source,
            replicas: req.replicas,
            bound_device: None,
            state: StateBlob::new(app.state_size_mb, BTreeMap::new()),
            status: InstanceStatus::Running,
            migration_target: None,
        };
        topology
            .reserve(&host, &instance.reservation(app))
            .expect("selected host has capacity");
        Ok(self.instances.entry(id).or_insert(instance))
    }

    /// Handles a gateway's install request for a device's IoT app.
    pub fn install_iot_app(
        &mut self,
        topology: &mut Topology,
        catalog: &Catalog,
        req: &InstallRequest,
    ) -> Result<InstallOutcome> {
        let app = catalog
            .app(&req.app)
            .map_err(|_| ScheduleError::UnknownApp(req.app.clone()))?;
        if app.kind != AppKind::IotApp {
            return Err(ScheduleError::WrongAppKind(req.app.clone()));
        }
        match topology.node(&req.gateway) {
            Ok(n) if n.tier == Tier::Gateway => {}
            _ => return Err(ScheduleError::UnknownNode(req.gateway.clone())),
        }

        if let Some(existing) = self.bound_instance(&req.device) {
            let id = existing.id.clone();
            return Ok(match existing.status {
                InstanceStatus::Migrating | InstanceStatus::Pending => InstallOutcome::InProgress(id),
                _ if existing.host != req.gateway => InstallOutcome::NeedsRoam {
                    instance: id,
                    from: existing.host.clone(),
                },
                InstanceStatus::Running => InstallOutcome::Existing(id),
                InstanceStatus::Stopped => {
                    let demand = existing.reservation(app);
                    topology
                        .reserve(&req.gateway, &demand)
                        .map_err(|_| ScheduleError::GatewayFull {
                            gateway: req.gateway.clone(),
                            app: req.app.clone(),
                        })?;
                    self.mark_running(&id);
                    InstallOutcome::Restarted(id)
                }
            });
        }

        let id = InstanceId::new(format!("{}@{}", req.app, req.device));
        if self.instances.contains_key(&id) {
            return Err(ScheduleError::DuplicateInstance(id));
        }
        topology
            .reserve(&req.gateway, &app.demand)
            .map_err(|_| ScheduleError::GatewayFull {
                gateway: req.gateway.clone(),
                app: req.app.clone(),
            })?;
        self.instances.insert(
            id.clone(),
            AppInstance {
                id: id.clone(),
                app: app.id.clone(),
                kind: AppKind::IotApp,
                host: req.gateway.clone(),
                source: req.gateway.clone(),
                replicas: 1,
                bound_device: Some(req.device.clone()),
                state: StateBlob::new(app.state_size_mb, req.preferences.clone()),
                status: InstanceStatus::Running,
                migration_target: None,
            },
        );
        Ok(InstallOutcome::Installed(id))
    }

    /// Adjusts the replica count of a running instance in place.
    pub fn scale(
        &mut self,
        topology: &mut Topology,
        catalog: &Catalog,
        id: &InstanceId,
        new_replicas: u32,
    ) -> Result<()> {
        if new_replicas == 0 {
            return Err(ScheduleError::InvalidReplicas);
        }
        let inst = self
            .instances
            .get(id)
            .ok_or_else(|| ScheduleError::UnknownInstance(id.clone()))?;
        if inst.status != InstanceStatus::Running {
            return Err(ScheduleError::InstanceNotRunning(id.clone()));
        }
        let app = catalog
            .app(&inst.app)
            .map_err(|_| ScheduleError::UnknownApp(inst.app.clone()))?;
        let current = inst.replicas;
        if new_replicas > current {
            let delta = app
                .demand
                .checked_mul(u64::from(new_replicas - current))
                .expect("scale overflow");
            topology
                .reserve(&inst.host, &delta)
                .map_err(|_| ScheduleError::InsufficientCapacity {
                    instance: id.clone(),
                    host: inst.host.clone(),
                    replicas: new_replicas,
                })?;
        } else if new_replicas < current {
            let delta = app
                .demand
                .checked_mul(u64::from(current - new_replicas))
                .expect("scale overflow");
            topology
                .release(&inst.host, &delta)
                .expect("running instance holds its reservation");
        }
        self.instances.get_mut(id).expect("checked above").replicas = new_replicas;
        Ok(())
    }

    /// Decides offload actions for every overloaded edge module.
    ///
    /// Works on a copy of the topology where in-flight migrations have
    /// already left their source, so a node that is shedding load is not
    /// shed twice.
    pub fn check_thresholds(
        &self,
        topology: &Topology,
        catalog: &Catalog,
        migrations: &Migrations,
        _time: SimTime,
    ) -> Vec<Action> {
        let mut view = topology.clone();
        for flight in migrations.iter().filter(|f| f.source_reserved) {
            let Some(inst) = self.instances.get(&flight.instance) else {
                continue;
            };
            if let Ok(app) = catalog.app(&inst.app) {
                let _ = view.release(&flight.from, &inst.reservation(app));
            }
        }

        let high = Share::from_f64(self.thresholds.high);
        let low = Share::from_f64(self.thresholds.low);
        let edges: Vec<NodeId> = topology
            .nodes_in_tier(Tier::EdgeModule)
            .map(|n| n.id.clone())
            .collect();

        let mut actions = Vec::new();
        for node_id in edges {
            let util = |v: &Topology| v.node(&node_id).expect("edge exists").utilization_share();
            if util(&view) <= high {
                continue;
            }
            let node_cap = view.node(&node_id).expect("edge exists").capacity;
            let mut victims: Vec<(Share, &AppInstance, &AppSpec)> = self
                .instances_on(&node_id)
                .filter(|i| i.status == InstanceStatus::Running && i.kind == AppKind::DataApp)
                .filter_map(|i| {
                    let app = catalog.app(&i.app).ok()?;
                    Some((i.reservation(app).bottleneck_share(&node_cap), i, app))
                })
                .collect();
            victims.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));

            if victims.is_empty() {
                actions.push(Action::Defer {
                    node: node_id.clone(),
                    instance: None,
                    reason: DeferReason::NoMovableInstance,
                });
                continue;
            }
            for (_, inst, app) in victims {
                if util(&view) <= low {
                    break;
                }
                let target = select_host(
                    &view,
                    app,
                    &inst.source,
                    inst.replicas,
                    Some(&node_id),
                    Some(self.thresholds.high),
                );
                match target {
                    Some((target, _)) => {
                        let demand = inst.reservation(app);
                        view.reserve(&target, &demand).expect("target fits");
                        view.release(&node_id, &demand).expect("victim holds reservation");
                        actions.push(Action::Offload {
                            instance: inst.id.clone(),
                            from: node_id.clone(),
                            target,
                            generation: topology.generation(),
                        });
                    }
                    None => actions.push(Action::Defer {
                        node: node_id.clone(),
                        instance: Some(inst.id.clone()),
                        reason: DeferReason::NoFeasibleTarget,
                    }),
                }
            }
        }
        actions
    }

    /// Executes a decision. Offloads are re-validated against the current
    /// topology and start a migration.
    pub fn apply_action(
        &mut self,
        topology: &mut Topology,
        catalog: &Catalog,
        migrations: &mut Migrations,
        action: &Action,
        now: SimTime,
    ) -> Result<ApplyOutcome> {
        match action {
            Action::Defer { .. } => Ok(ApplyOutcome::Deferred),
            Action::Offload {
                instance,
                from,
                target,
                generation,
            } => {
                if *generation != topology.generation() {
                    return Err(ScheduleError::StaleAction(format!(
                        "topology changed since offload of `{instance}` was decided"
                    )));
                }
                let inst = self
                    .instances
                    .get(instance)
                    .ok_or_else(|| ScheduleError::StaleAction(format!("`{instance}` is gone")))?;
                if inst.status != InstanceStatus::Running || &inst.host != from {
                    return Err(ScheduleError::StaleAction(format!(
                        "`{instance}` is no longer running on `{from}`"
                    )));
                }
                match migrations.begin(self, topology, catalog, instance, target, now) {
                    Ok(start) => Ok(ApplyOutcome::Migration(start)),
                    Err(MigrationError::TargetInfeasible { reason, .. }) => Err(
                        ScheduleError::StaleAction(format!("`{target}` no longer feasible: {reason}")),
                    ),
                    Err(e) => Err(ScheduleError::StaleAction(e.to_string())),
                }
            }
        }
    }

    /// Bottleneck utilization of `node` once in-flight migrations away from
    /// it have completed.
    pub fn projected_utilization(
        &self,
        topology: &Topology,
        catalog: &Catalog,
        migrations: &Migrations,
        node: &NodeId,
    ) -> Option<f64> {
        let n = topology.node(node).ok()?;
        let mut alloc = n.alloc;
        for flight in migrations.iter().filter(|f| f.source_reserved && &f.from == node) {
            let inst = self.instances.get(&flight.instance)?;
            let app = catalog.app(&inst.app).ok()?;
            alloc = alloc.checked_sub(&inst.reservation(app))?;
        }
        Some(alloc.bottleneck_share(&n.capacity).as_f64())
    }

    pub(crate) fn mark_migrating(&mut self, id: &InstanceId, target: NodeId) {
        if let Some(i) = self.instances.get_mut(id) {
            i.status = InstanceStatus::Migrating;
            i.migration_target = Some(target);
        }
    }

    pub(crate) fn finish_migration(&mut self, id: &InstanceId, host: NodeId, state: StateBlob) {
        if let Some(i) = self.instances.get_mut(id) {
            i.host = host;
            i.state = state;
            i.status = InstanceStatus::Running;
            i.migration_target = None;
        }
    }

    pub(crate) fn mark_stopped(&mut self, id: &InstanceId) {
        if let Some(i) = self.instances.get_mut(id) {
            i.status = InstanceStatus::Stopped;
        }
    }

    pub(crate) fn mark_running(&mut self, id: &InstanceId) {
        if let Some(i) = self.instances.get_mut(id) {
            i.status = InstanceStatus::Running;
        }
    }
}
