//! Application specifications, device profiles and the firmware registry.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::AppId;
use crate::topology::{ResourceVector, Tier};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("app `{0}` already registered")]
    DuplicateAppId(AppId),
    #[error("unknown app `{0}`")]
    UnknownApp(AppId),
    #[error("app `{app}` may not run on tiers {tiers:?}")]
    TierViolation { app: AppId, tiers: Vec<Tier> },
    #[error("app `{app}`: aggregation factor must be >= 1, got {factor}")]
    InvalidAggregationFactor { app: AppId, factor: f64 },
    #[error("app `{app}`: state size must be a finite value >= 0, got {size}")]
    InvalidStateSize { app: AppId, size: f64 },
    #[error("app `{0}`: only data apps carry a latency requirement")]
    LatencyOnIotApp(AppId),
    #[error("profile for model `{0}` already registered")]
    DuplicateProfile(String),
    #[error("device profile `{0}` must have a positive data rate")]
    InvalidDataRate(String),
    #[error("device profile `{model}` must reference an IoT app, `{app}` is not one")]
    NotAnIotApp { model: String, app: AppId },
    #[error("unknown device profile `{0}`")]
    UnknownProfile(String),
    #[error("profile `{model}` references missing app `{app}`")]
    DanglingAppReference { model: String, app: AppId },
    #[error("firmware ({model}, {os_version}, {version}) already registered")]
    DuplicateFirmware {
        model: String,
        os_version: String,
        version: FirmwareVersion,
    },
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("invalid firmware version `{0}` (expected dotted non-negative integers)")]
    InvalidVersion(String),
    #[error("no firmware for model `{model}` on OS `{os_version}`")]
    NoCompatibleFirmware { model: String, os_version: String },
}

pub type Result<T> = std::result::Result<T, CatalogError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    IotApp,
    DataApp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub id: AppId,
    pub kind: AppKind,
    /// Per-replica demand.
    pub demand: ResourceVector,
    pub latency_requirement_ms: Option<u64>,
    /// Raw input size per unit of aggregated output. 1 for IoT apps.
    pub aggregation_factor: f64,
    /// State carried along on migration, MB.
    pub state_size_mb: f64,
    pub allowed_tiers: BTreeSet<Tier>,
}

impl AppSpec {
    /// An IoT app, pinned to gateways.
    pub fn iot_app(id: impl Into<AppId>, demand: ResourceVector, state_size_mb: f64) -> Self {
        Self {
            id: id.into(),
            kind: AppKind::IotApp,
            demand,
            latency_requirement_ms: None,
            aggregation_factor: 1.0,
            state_size_mb,
            allowed_tiers: BTreeSet::from([Tier::Gateway]),
        }
    }

    /// A data app allowed on edge modules and the central cloud.
    pub fn data_app(
        id: impl Into<AppId>,
        demand: ResourceVector,
        latency_requirement_ms: Option<u64>,
        aggregation_factor: f64,
        state_size_mb: f64,
    ) -> Self {
        Self {
            id: id.into(),
            kind: AppKind::DataApp,
            demand,
            latency_requirement_ms,
            aggregation_factor,
            state_size_mb,
            allowed_tiers: BTreeSet::from([Tier::EdgeModule, Tier::CentralCloud]),
        }
    }

    pub fn allows(&self, tier: Tier) -> bool {
        self.allowed_tiers.contains(&tier)
    }

    pub fn validate(&self) -> Result<()> {
        let tiers_ok = match self.kind {
            AppKind::IotApp => {
                self.allowed_tiers.len() == 1 && self.allowed_tiers.contains(&Tier::Gateway)
            }
            AppKind::DataApp => {
                !self.allowed_tiers.is_empty() && !self.allowed_tiers.contains(&Tier::Gateway)
            }
        };
        if !tiers_ok {
            return Err(CatalogError::TierViolation {
                app: self.id.clone(),
                tiers: self.allowed_tiers.iter().copied().collect(),
            });
        }
        if !(self.aggregation_factor.is_finite() && self.aggregation_factor >= 1.0) {
            return Err(CatalogError::InvalidAggregationFactor {
                app: self.id.clone(),
                factor: self.aggregation_factor,
            });
        }
        if !(self.state_size_mb.is_finite() && self.state_size_mb >= 0.0) {
            return Err(CatalogError::InvalidStateSize {
                app: self.id.clone(),
                size: self.state_size_mb,
            });
        }
        if self.kind == AppKind::IotApp && self.latency_requirement_ms.is_some() {
            return Err(CatalogError::LatencyOnIotApp(self.id.clone()));
        }
        Ok(())
    }
}

/// Radio technology tag. Only carried as metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Ble,
    Zigbee,
    Zwave,
    Lora,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub model: String,
    pub os_version: String,
    pub protocol: Protocol,
    pub data_rate_kbps: u64,
    pub iot_app: AppId,
}

/// Dotted numeric version, ordered component by component (`1.10 > 1.9`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FirmwareVersion {
    parts: Vec<u64>,
    raw: String,
}

impl FirmwareVersion {
    pub fn parts(&self) -> &[u64] {
        &self.parts
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

impl FromStr for FirmwareVersion {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split('.')
            .map(|p| {
                if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                    return None;
                }
                p.parse::<u64>().ok()
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CatalogError::InvalidVersion(s.to_owned()))?;
        Ok(Self {
            parts,
            raw: s.to_owned(),
        })
    }
}

impl Ord for FirmwareVersion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.parts
            .cmp(&other.parts)
            .then_with(|| self.raw.cmp(&other.raw))
    }
}

impl PartialOrd for FirmwareVersion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for FirmwareVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl Serialize for FirmwareVersion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for FirmwareVersion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareEntry {
    pub model: String,
    pub os_version: String,
    pub firmware_version: FirmwareVersion,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    apps: BTreeMap<AppId, AppSpec>,
    profiles: BTreeMap<String, DeviceProfile>,
    /// (model, os_version) -> versions.
    firmware: BTreeMap<(String, String), BTreeSet<FirmwareVersion>>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_app(&mut self, spec: AppSpec) -> Result<AppId> {
        if self.apps.contains_key(&spec.id) {
            return Err(CatalogError::DuplicateAppId(spec.id));
        }
        spec.validate()?;
        let id = spec.id.clone();
        self.apps.insert(id.clone(), spec);
        Ok(id)
    }

    /// Removes an app. Profiles that reference it are left dangling.
    pub fn remove_app(&mut self, id: &AppId) -> Option<AppSpec> {
        self.apps.remove(id)
    }

    pub fn app(&self, id: &AppId) -> Result<&AppSpec> {
        self.apps.get(id).ok_or_else(|| CatalogError::UnknownApp(id.clone()))
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppSpec> {
        self.apps.values()
    }

    pub fn register_profile(&mut self, profile: DeviceProfile) -> Result<()> {
        if profile.model.is_empty() {
            return Err(CatalogError::EmptyField("model"));
        }
        if self.profiles.contains_key(&profile.model) {
            return Err(CatalogError::DuplicateProfile(profile.model));
        }
        if profile.data_rate_kbps == 0 {
            return Err(CatalogError::InvalidDataRate(profile.model));
        }
        match self.apps.get(&profile.iot_app) {
            None => {
                return Err(CatalogError::DanglingAppReference {
                    model: profile.model,
                    app: profile.iot_app,
                })
            }
            Some(app) if app.kind != AppKind::IotApp => {
                return Err(CatalogError::NotAnIotApp {
                    model: profile.model,
                    app: profile.iot_app,
                })
            }
            Some(_) => {}
        }
        self.profiles.insert(profile.model.clone(), profile);
        Ok(())
    }

    pub fn profile(&self, model: &str) -> Result<&DeviceProfile> {
        self.profiles
            .get(model)
            .ok_or_else(|| CatalogError::UnknownProfile(model.to_owned()))
    }

    pub fn profiles(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.profiles.values()
    }

    pub fn register_firmware(&mut self, entry: FirmwareEntry) -> Result<()> {
        if entry.model.is_empty() {
            return Err(CatalogError::EmptyField("model"));
        }
        if entry.os_version.is_empty() {
            return Err(CatalogError::EmptyField("os_version"));
        }
        let versions = self
            .firmware
            .entry((entry.model.clone(), entry.os_version.clone()))
            .or_default();
        if versions.contains(&entry.firmware_version) {
            return Err(CatalogError::DuplicateFirmware {
                model: entry.model,
                os_version: entry.os_version,
                version: entry.firmware_version,
            });
        }
        versions.insert(entry.firmware_version);
        Ok(())
    }

    /// Highest firmware registered for exactly this (model, OS) pair.
    pub fn match_firmware(&self, model: &str, os_version: &str) -> Result<&FirmwareVersion> {
        self.firmware
            .get(&(model.to_owned(), os_version.to_owned()))
            .and_then(|v| v.last())
            .ok_or_else(|| CatalogError::NoCompatibleFirmware {
                model: model.to_owned(),
                os_version: os_version.to_owned(),
            })
    }

    pub fn firmware_entries(&self) -> impl Iterator<Item = FirmwareEntry> + '_ {
        self.firmware.iter().flat_map(|((model, os), versions)| {
            versions.iter().map(move |v| FirmwareEntry {
                model: model.clone(),
                os_version: os.clone(),
                firmware_version: v.clone(),
            })
        })
    }

    /// The IoT app that manages devices of this profile.
    pub fn resolve_iot_app(&self, profile: &DeviceProfile) -> Result<&AppSpec> {
        match self.profiles.get(&profile.model) {
            Some(p) if p == profile => {}
            _ => return Err(CatalogError::UnknownProfile(profile.model.clone())),
        }
        self.apps
            .get(&profile.iot_app)
            .ok_or_else(|| CatalogError::DanglingAppReference {
                model: profile.model.clone(),
                app: profile.iot_app.clone(),
            })
    }
}
