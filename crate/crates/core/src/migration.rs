//! Stop-and-copy migration of application instances.
//!
//! A migration reserves the target first, transfers the state snapshot over
//! the shortest up-path, then releases the source. Between start and
//! completion the instance holds resources on both nodes; it never holds
//! them on neither. Downtime equals the transfer time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::ids::{DeviceId, InstanceId, LinkId, NodeId};
use crate::scheduler::{InstanceStatus, Scheduler};
use crate::topology::{Link, Topology};
use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MigrationError {
    #[error("transfer path is empty")]
    EmptyPath,
    #[error("link `{0}` is down")]
    LinkDown(LinkId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("unknown instance `{0}`")]
    UnknownInstance(InstanceId),
    #[error("instance `{0}` is not running")]
    InstanceNotRunning(InstanceId),
    #[error("`{target}` cannot host instance `{instance}`: {reason}")]
    TargetInfeasible {
        instance: InstanceId,
        target: NodeId,
        reason: String,
    },
    #[error("no up path from `{0}` to `{1}`")]
    Unreachable(NodeId, NodeId),
    #[error("device `{0}` has no bound IoT app")]
    NoBoundApp(DeviceId),
    #[error("gateway `{gateway}` has no room for `{instance}`")]
    TargetGatewayFull { instance: InstanceId, gateway: NodeId },
    #[error("instance `{0}` is already migrating")]
    AlreadyMigrating(InstanceId),
}

/// Opaque application state carried across migrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBlob {
    pub size_mb: f64,
    pub version: u64,
    pub payload: BTreeMap<String, String>,
}

impl StateBlob {
    pub fn new(size_mb: f64, payload: BTreeMap<String, String>) -> Self {
        Self {
            size_mb,
            version: 0,
            payload,
        }
    }

    /// Writes one key; every write bumps the version.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.payload.insert(key.into(), value.into());
        self.version += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub instance: InstanceId,
    pub from: NodeId,
    pub to: NodeId,
    pub started_at: SimTime,
    pub completed_at: SimTime,
    pub bytes_moved_mb: f64,
    pub downtime_ms: u64,
    pub state_version: u64,
}

/// A migration between start and completion.
#[derive(Debug, Clone, PartialEq)]
pub struct InFlight {
    pub instance: InstanceId,
    pub from: NodeId,
    pub to: NodeId,
    pub started_at: SimTime,
    pub completes_at: SimTime,
    pub snapshot: StateBlob,
    /// Whether the source still holds the instance's reservation.
    pub source_reserved: bool,
}

impl InFlight {
    pub fn downtime_ms(&self) -> u64 {
        self.completes_at - self.started_at
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MigrationStart {
    /// Target is the current host; nothing moves.
    Noop(MigrationRecord),
    Started(InFlight),
}

/// Stop-and-copy transfer time over a path: serialization at the path's
/// bottleneck bandwidth plus the propagation latency of every hop.
///
/// `size_mb * 8 / min_bandwidth_mbps` seconds, rounded up to whole ms.
pub fn transfer_duration(size_mb: f64, path: &[&Link]) -> Result<u64, MigrationError> {
    let bottleneck = path
        .iter()
        .map(|l| {
            if l.is_up() {
                Ok(l.bandwidth_mbps)
            } else {
                Err(MigrationError::LinkDown(l.id.clone()))
            }
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .min()
        .ok_or(MigrationError::EmptyPath)?;
    let serialization = (size_mb * 8.0 * 1000.0 / bottleneck as f64).ceil() as u64;
    let propagation: u64 = path.iter().map(|l| l.latency_ms).sum();
    Ok(serialization + propagation)
}

pub fn transfer_duration_on(
    topology: &Topology,
    size_mb: f64,
    path: &[LinkId],
) -> Result<u64, MigrationError> {
    let links = path
        .iter()
        .map(|id| {
            topology
                .link(id)
                .map_err(|_| MigrationError::UnknownLink(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    transfer_duration(size_mb, &links)
}

/// In-flight migrations, keyed by instance.
#[derive(Debug, Clone, Default)]
pub struct Migrations {
    in_flight: BTreeMap<InstanceId, InFlight>,
}

impl Migrations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, instance: &InstanceId) -> Option<&InFlight> {
        self.in_flight.get(instance)
    }

    pub fn iter(&self) -> impl Iterator<Item = &InFlight> {
        self.in_flight.values()
    }

    pub fn is_empty(&self) -> bool {
        self.in_flight.is_empty()
    }

    /// Starts migrating a running instance to `target`.
    pub fn begin(
        &mut self,
        scheduler: &mut Scheduler,
        topology: &mut Topology,
        catalog: &Catalog,
        instance: &InstanceId,
        target: &NodeId,
        now: SimTime,
    ) -> Result<MigrationStart, MigrationError> {
        let inst = scheduler
            .instance(instance)
            .ok_or_else(|| MigrationError::UnknownInstance(instance.clone()))?;
        if inst.status != InstanceStatus::Running {
            return Err(MigrationError::InstanceNotRunning(instance.clone()));
        }
        self.begin_inner(scheduler, topology, catalog, instance, target, now, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn begin_inner(
        &mut self,
        scheduler: &mut Scheduler,
        topology: &mut Topology,
        catalog: &Catalog,
        instance: &InstanceId,
        target: &NodeId,
        now: SimTime,
        source_reserved: bool,
    ) -> Result<MigrationStart, MigrationError> {
        if self.in_flight.contains_key(instance) {
            return Err(MigrationError::AlreadyMigrating(instance.clone()));
        }
        let inst = scheduler
            .instance(instance)
            .ok_or_else(|| MigrationError::UnknownInstance(instance.clone()))?
            .clone();
        if &inst.host == target {
            return Ok(MigrationStart::Noop(MigrationRecord {
                instance: instance.clone(),
                from: inst.host.clone(),
                to: target.clone(),
                started_at: now,
                completed_at: now,
                bytes_moved_mb: 0.0,
                downtime_ms: 0,
                state_version: inst.state.version,
            }));
        }

        let infeasible = |reason: String| MigrationError::TargetInfeasible {
            instance: instance.clone(),
            target: target.clone(),
            reason,
        };
        let app = catalog
            .app(&inst.app)
            .map_err(|e| infeasible(e.to_string()))?;
        let node = topology
            .node(target)
            .map_err(|e| infeasible(e.to_string()))?;
        if !app.allows(node.tier) {
            return Err(infeasible(format!("tier {} not allowed", node.tier)));
        }
        if !node.is_up() {
            return Err(infeasible("node is down".into()));
        }
        if let Some(req) = app.latency_requirement_ms {
            match topology.path_latency(&inst.source, target) {
                Ok(lat) if lat <= req => {}
                Ok(lat) => return Err(infeasible(format!("latency {lat} ms > {req} ms"))),
                Err(e) => return Err(infeasible(e.to_string())),
            }
        }
        let route = topology
            .route(&inst.host, target)
            .map_err(|_| MigrationError::Unreachable(inst.host.clone(), target.clone()))?;
        let snapshot = inst.state.clone();
        let duration = transfer_duration_on(topology, snapshot.size_mb, &route.links)?;
        let demand = inst.reservation(app);
        topology
            .reserve(target, &demand)
            .map_err(|e| infeasible(e.to_string()))?;

        scheduler.mark_migrating(instance, target.clone());
        let flight = InFlight {
            instance: instance.clone(),
            from: inst.host.clone(),
            to: target.clone(),
            started_at: now,
            completes_at: now + duration,
            snapshot,
            source_reserved,
        };
        self.in_flight.insert(instance.clone(), flight.clone());
        Ok(MigrationStart::Started(flight))
    }

    /// Finishes a migration: releases the source and resumes on the target
    /// with the snapshotted state.
    pub fn complete(
        &mut self,
        scheduler: &mut Scheduler,
        topology: &mut Topology,
        catalog: &Catalog,
        instance: &InstanceId,
        now: SimTime,
    ) -> Result<MigrationRecord, MigrationError> {
        let flight = self
            .in_flight
            .remove(instance)
            .ok_or_else(|| MigrationError::UnknownInstance(instance.clone()))?;
        let inst = scheduler
            .instance(instance)
            .ok_or_else(|| MigrationError::UnknownInstance(instance.clone()))?;
        let app = catalog.app(&inst.app).map_err(|e| MigrationError::TargetInfeasible {
            instance: instance.clone(),
            target: flight.to.clone(),
            reason: e.to_string(),
        })?;
        let demand = inst.reservation(app);
        if flight.source_reserved {
            topology
                .release(&flight.from, &demand)
                .expect("migration source holds the instance reservation");
        }
        scheduler.finish_migration(instance, flight.to.clone(), flight.snapshot.clone());
        Ok(MigrationRecord {
            instance: instance.clone(),
            from: flight.from,
            to: flight.to,
            started_at: flight.started_at,
            completed_at: now,
            bytes_moved_mb: flight.snapshot.size_mb,
            downtime_ms: now - flight.started_at,
            state_version: flight.snapshot.version,
        })
    }

    /// Runs a migration to completion in one call.
    pub fn migrate(
        &mut self,
        scheduler: &mut Scheduler,
        topology: &mut Topology,
        catalog: &Catalog,
        instance: &InstanceId,
        target: &NodeId,
        now: SimTime,
    ) -> Result<MigrationRecord, MigrationError> {
        match self.begin(scheduler, topology, catalog, instance, target, now)? {
            MigrationStart::Noop(rec) => Ok(rec),
            MigrationStart::Started(flight) => {
                self.complete(scheduler, topology, catalog, instance, flight.completes_at)
            }
        }
    }

    /// Moves the IoT app bound to `device` onto `to_gateway`.
    ///
    /// A stopped instance (one that previously failed to follow its device)
    /// holds no reservation, so only the target is reserved. When the target
    /// gateway is full the instance is left stopped on its current gateway.
    pub fn roam(
        &mut self,
        scheduler: &mut Scheduler,
        topology: &mut Topology,
        catalog: &Catalog,
        device: &DeviceId,
        to_gateway: &NodeId,
        now: SimTime,
    ) -> Result<MigrationStart, MigrationError> {
        let inst = scheduler
            .bound_instance(device)
            .ok_or_else(|| MigrationError::NoBoundApp(device.clone()))?
            .clone();
        if self.in_flight.contains_key(&inst.id) {
            return Err(MigrationError::AlreadyMigrating(inst.id));
        }
        let source_reserved = match inst.status {
            InstanceStatus::Running => true,
            InstanceStatus::Stopped => false,
            InstanceStatus::Pending | InstanceStatus::Migrating => {
                return Err(MigrationError::InstanceNotRunning(inst.id))
            }
        };
        if &inst.host == to_gateway && inst.status == InstanceStatus::Running {
            return self.begin_inner(scheduler, topology, catalog, &inst.id, to_gateway, now, true);
        }
        let app = catalog
            .app(&inst.app)
            .map_err(|e| MigrationError::TargetInfeasible {
                instance: inst.id.clone(),
                target: to_gateway.clone(),
                reason: e.to_string(),
            })?;
        let demand = inst.reservation(app);
        if !topology.can_fit(to_gateway, &demand) {
            if source_reserved {
                topology
                    .release(&inst.host, &demand)
                    .expect("running instance holds its reservation");
                scheduler.mark_stopped(&inst.id);
            }
            return Err(MigrationError::TargetGatewayFull {
                instance: inst.id,
                gateway: to_gateway.clone(),
            });
        }
        if &inst.host == to_gateway {
            // Stopped on the gateway the device came back to: restart in place.
            topology
                .reserve(to_gateway, &demand)
                .expect("capacity checked above");
            scheduler.mark_running(&inst.id);
            return Ok(MigrationStart::Noop(MigrationRecord {
                instance: inst.id.clone(),
                from: inst.host.clone(),
                to: to_gateway.clone(),
                started_at: now,
                completed_at: now,
                bytes_moved_mb: 0.0,
                downtime_ms: 0,
                state_version: inst.state.version,
            }));
        }
        self.begin_inner(scheduler, topology, catalog, &inst.id, to_gateway, now, source_reserved)
    }
}
