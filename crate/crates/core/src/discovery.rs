//! Gateway agent: device attach/detach, firmware lookup and IoT-app install
//! requests toward the orchestrator.
//!
//! Discovery is event driven. The radio-level protocol is not simulated; an
//! attach event stands for a completed discovery handshake.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, FirmwareVersion};
use crate::ids::{AppId, DeviceId, NodeId};
use crate::topology::{Tier, Topology};
use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscoveryError {
    #[error("`{0}` is not a gateway")]
    NotAGateway(NodeId),
    #[error("no device profile for model `{0}`")]
    UnknownDeviceProfile(String),
    #[error("device `{device}` is attached to `{gateway}`; detach it first")]
    AlreadyAttachedElsewhere { device: DeviceId, gateway: NodeId },
    #[error("device `{device}` is not attached to `{gateway}`")]
    NotAttachedHere { device: DeviceId, gateway: NodeId },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentStatus {
    Attached,
    Detached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub device_id: DeviceId,
    pub model: String,
    pub os_version: String,
    pub gateway: NodeId,
    pub attached_at: SimTime,
    pub status: AttachmentStatus,
}

/// Ask the orchestrator to run `app` for `device` on `gateway`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallRequest {
    pub device: DeviceId,
    pub gateway: NodeId,
    pub app: AppId,
    /// User preferences, opaque to the platform.
    pub preferences: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryOutcome {
    pub attachment: Attachment,
    /// `None` when no firmware matches the device's (model, OS).
    pub firmware: Option<FirmwareVersion>,
    /// `None` when the attach was a repeat of the current attachment.
    pub install_request: Option<InstallRequest>,
}

#[derive(Debug, Clone, Default)]
pub struct Discovery {
    /// Latest attachment record per device.
    current: BTreeMap<DeviceId, Attachment>,
}

impl Discovery {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn handle_attach(
        &mut self,
        topology: &Topology,
        catalog: &Catalog,
        gateway: &NodeId,
        device: &DeviceId,
        model: &str,
        os_version: &str,
        time: SimTime,
        preferences: BTreeMap<String, String>,
    ) -> Result<DiscoveryOutcome, DiscoveryError> {
        match topology.node(gateway) {
            Ok(node) if node.tier == Tier::Gateway => {}
            _ => return Err(DiscoveryError::NotAGateway(gateway.clone())),
        }
        let profile = catalog
            .profile(model)
            .map_err(|_| DiscoveryError::UnknownDeviceProfile(model.to_owned()))?;

        if let Some(existing) = self.current.get(device) {
            if existing.status == AttachmentStatus::Attached {
                if &existing.gateway != gateway {
                    return Err(DiscoveryError::AlreadyAttachedElsewhere {
                        device: device.clone(),
                        gateway: existing.gateway.clone(),
                    });
                }
                return Ok(DiscoveryOutcome {
                    attachment: existing.clone(),
                    firmware: catalog.match_firmware(model, os_version).ok().cloned(),
                    install_request: None,
                });
            }
        }

        let app = catalog.resolve_iot_app(profile)?;
        let firmware = catalog.match_firmware(model, os_version).ok().cloned();
        let attachment = Attachment {
            device_id: device.clone(),
            model: model.to_owned(),
            os_version: os_version.to_owned(),
            gateway: gateway.clone(),
            attached_at: time,
            status: AttachmentStatus::Attached,
        };
        self.current.insert(device.clone(), attachment.clone());
        Ok(DiscoveryOutcome {
            attachment,
            firmware,
            install_request: Some(InstallRequest {
                device: device.clone(),
                gateway: gateway.clone(),
                app: app.id.clone(),
                preferences,
            }),
        })
    }

    pub fn handle_detach(
        &mut self,
        gateway: &NodeId,
        device: &DeviceId,
        _time: SimTime,
    ) -> Result<(), DiscoveryError> {
        match self.current.get_mut(device) {
            Some(a) if a.status == AttachmentStatus::Attached && &a.gateway == gateway => {
                a.status = AttachmentStatus::Detached;
                Ok(())
            }
            _ => Err(DiscoveryError::NotAttachedHere {
                device: device.clone(),
                gateway: gateway.clone(),
            }),
        }
    }

    pub fn current_gateway(&self, device: &DeviceId) -> Option<&NodeId> {
        self.current
            .get(device)
            .filter(|a| a.status == AttachmentStatus::Attached)
            .map(|a| &a.gateway)
    }

    pub fn attachment(&self, device: &DeviceId) -> Option<&Attachment> {
        self.current.get(device)
    }

    /// Devices currently attached, in id order.
    pub fn attached(&self) -> impl Iterator<Item = &Attachment> {
        self.current
            .values()
            .filter(|a| a.status == AttachmentStatus::Attached)
    }
}
