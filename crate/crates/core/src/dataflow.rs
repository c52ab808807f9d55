//! Fluid accounting of sensed data: generation at devices, delivery from the
//! gateway toward its sink, buffering, aggregation and uplink to the cloud.
//!
//! Volumes are tracked in bits as integers. A rate in kbps over a step in ms
//! is exactly that many bits, and a bandwidth in Mbps over a step in ms is a
//! thousand times as many, so conservation holds without rounding slack.
//! One MB is 8,000,000 bits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AppKind, Catalog};
use crate::discovery::Discovery;
use crate::ids::{DeviceId, InstanceId, LinkId, NodeId};
use crate::scheduler::{InstanceStatus, Scheduler};
use crate::topology::Topology;

pub const BITS_PER_MB: u64 = 8_000_000;

pub fn mb_to_bits(mb: f64) -> u64 {
    (mb * BITS_PER_MB as f64).round() as u64
}

pub fn bits_to_mb(bits: f64) -> f64 {
    bits / BITS_PER_MB as f64
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("device `{device}` is not attached to `{gateway}`")]
    NotAttached { device: DeviceId, gateway: NodeId },
    #[error("no up path from `{0}` to `{1}`")]
    Unreachable(NodeId, NodeId),
    #[error("unknown flow `{0}`")]
    UnknownFlow(DeviceId),
    #[error("instance `{0}` is not a running data app")]
    NotADataApp(InstanceId),
    #[error("no data generated in window")]
    EmptyWindow,
}

/// Per-device flow. The flow id is the device id; roaming rebinds the same
/// flow so its counters span the whole life of the device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub device: DeviceId,
    pub from: NodeId,
    pub to: NodeId,
    pub rate_kbps: u64,
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub buffered: u64,
}

impl Flow {
    /// generated = delivered + dropped + buffered
    pub fn is_conserved(&self) -> bool {
        self.delivered
            .checked_add(self.dropped)
            .and_then(|s| s.checked_add(self.buffered))
            == Some(self.generated)
    }
}

/// Outcome of one integration step for one flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDelta {
    pub device: DeviceId,
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Buffer level after the step.
    pub buffered: u64,
}

/// What the kernel knows about a flow for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepInput {
    pub device: DeviceId,
    /// The device is attached and producing data.
    pub generating: bool,
    /// Links from the gateway to a serving sink, or `None` when the data
    /// cannot currently be delivered.
    pub route: Option<Vec<LinkId>>,
}

#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    flows: BTreeMap<DeviceId, Flow>,
    buffer_bits: u64,
}

impl FlowTable {
    pub fn new(buffer_mb: f64) -> Self {
        Self {
            flows: BTreeMap::new(),
            buffer_bits: mb_to_bits(buffer_mb),
        }
    }

    pub fn buffer_bits(&self) -> u64 {
        self.buffer_bits
    }

    pub fn flow(&self, device: &DeviceId) -> Option<&Flow> {
        self.flows.get(device)
    }

    pub fn flows(&self) -> impl Iterator<Item = &Flow> {
        self.flows.values()
    }

    /// Opens (or rebinds) the device's flow from `gateway` to `sink`.
    pub fn open_flow(
        &mut self,
        discovery: &Discovery,
        topology: &Topology,
        device: &DeviceId,
        gateway: &NodeId,
        sink: &NodeId,
        rate_kbps: u64,
    ) -> Result<&Flow, FlowError> {
        if discovery.current_gateway(device) != Some(gateway) {
            return Err(FlowError::NotAttached {
                device: device.clone(),
                gateway: gateway.clone(),
            });
        }
        topology
            .route(gateway, sink)
            .map_err(|_| FlowError::Unreachable(gateway.clone(), sink.clone()))?;
        let flow = self.flows.entry(device.clone()).or_insert_with(|| Flow {
            device: device.clone(),
            from: gateway.clone(),
            to: sink.clone(),
            rate_kbps,
            generated: 0,
            delivered: 0,
            dropped: 0,
            buffered: 0,
        });
        flow.from = gateway.clone();
        flow.to = sink.clone();
        flow.rate_kbps = rate_kbps;
        Ok(flow)
    }

    pub fn set_rate(&mut self, device: &DeviceId, rate_kbps: u64) -> Result<(), FlowError> {
        let flow = self
            .flows
            .get_mut(device)
            .ok_or_else(|| FlowError::UnknownFlow(device.clone()))?;
        flow.rate_kbps = rate_kbps;
        Ok(())
    }

    /// Advances a single flow by `dt_ms` with at most `capacity_bits` of
    /// delivery. Whatever cannot be delivered is buffered; overflow drops the
    /// oldest data.
    pub fn advance(
        &mut self,
        device: &DeviceId,
        dt_ms: u64,
        generating: bool,
        capacity_bits: u64,
    ) -> Result<FlowDelta, FlowError> {
        let buffer_cap = self.buffer_bits;
        let flow = self
            .flows
            .get_mut(device)
            .ok_or_else(|| FlowError::UnknownFlow(device.clone()))?;
        let generated = if generating { flow.rate_kbps * dt_ms } else { 0 };
        let available = flow.buffered + generated;
        let delivered = available.min(capacity_bits);
        let backlog = available - delivered;
        let dropped = backlog.saturating_sub(buffer_cap);
        flow.generated += generated;
        flow.delivered += delivered;
        flow.dropped += dropped;
        flow.buffered = backlog - dropped;
        debug_assert!(flow.is_conserved());
        Ok(FlowDelta {
            device: device.clone(),
            generated,
            delivered,
            dropped,
            buffered: flow.buffered,
        })
    }

    /// Advances every listed flow by one step, dividing each link's
    /// bandwidth equally among the routed flows crossing it.
    pub fn advance_all(
        &mut self,
        topology: &Topology,
        inputs: &[StepInput],
        dt_ms: u64,
    ) -> Vec<FlowDelta> {
        let mut sharing: BTreeMap<&LinkId, u64> = BTreeMap::new();
        for input in inputs {
            if let Some(route) = &input.route {
                for link in route.iter().collect::<BTreeSet<_>>() {
                    *sharing.entry(link).or_default() += 1;
                }
            }
        }
        inputs
            .iter()
            .filter_map(|input| {
                let capacity = match &input.route {
                    None => 0,
                    Some(route) => route
                        .iter()
                        .map(|id| {
                            let bw = topology.link(id).map_or(0, |l| {
                                if l.is_up() {
                                    l.bandwidth_mbps
                                } else {
                                    0
                                }
                            });
                            bw * dt_ms * 1000 / sharing[id]
                        })
                        .min()
                        .unwrap_or(u64::MAX),
                };
                self.advance(&input.device, dt_ms, input.generating, capacity).ok()
            })
            .collect()
    }
}

/// Size of the aggregated output produced from `window_mb` of raw input.
pub fn aggregate(
    scheduler: &Scheduler,
    catalog: &Catalog,
    instance: &InstanceId,
    window_mb: f64,
) -> Result<f64, FlowError> {
    let inst = scheduler
        .instance(instance)
        .filter(|i| i.kind == AppKind::DataApp && i.status == InstanceStatus::Running)
        .ok_or_else(|| FlowError::NotADataApp(instance.clone()))?;
    let app = catalog
        .app(&inst.app)
        .map_err(|_| FlowError::NotADataApp(instance.clone()))?;
    Ok(window_mb / app.aggregation_factor)
}

/// Byte counts over one reporting window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UplinkWindow {
    /// Bits generated at devices.
    pub generated: f64,
    /// Bits arriving in the central cloud.
    pub uplink: f64,
}

impl UplinkWindow {
    /// Fraction of generated volume that reached the cloud.
    pub fn ratio(&self) -> Result<f64, FlowError> {
        if self.generated <= 0.0 {
            return Err(FlowError::EmptyWindow);
        }
        Ok(self.uplink / self.generated)
    }
}
