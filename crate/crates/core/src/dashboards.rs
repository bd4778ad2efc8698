//! Declarative dashboard documents, generated per member and per device and
//! executed against the store at render time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::{serde_ms, Timestamp};
use crate::devices::{Device, DeviceRegistry};
use crate::error::{Error, Result};
use crate::ids::{DashboardId, DeviceId, MemberId};
use crate::tsstore::{Aggregate, Query, Sample, Selector, TsStore, TAG_DEVICE_ID, TAG_FIELDNAME};

pub const DEFAULT_LOOKBACK_S: f64 = 6.0 * 3600.0;
const DEFAULT_PANEL_EVERY_S: f64 = 900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OwnerKind {
    Member,
    Device,
}

impl std::fmt::Display for OwnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OwnerKind::Member => "member",
            OwnerKind::Device => "device",
        })
    }
}

impl std::str::FromStr for OwnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "member" => Ok(OwnerKind::Member),
            "device" => Ok(OwnerKind::Device),
            other => Err(Error::InvalidArgument(format!("unknown owner kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Private,
    Public,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderHint {
    Timeseries,
    Stat,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelQuery {
    pub selector: Selector,
    pub agg: Aggregate,
    #[serde(default)]
    pub every_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub title: String,
    pub query: PanelQuery,
    #[serde(default = "default_lookback")]
    pub lookback_s: f64,
    pub render_hint: RenderHint,
}

fn default_lookback() -> f64 {
    DEFAULT_LOOKBACK_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub dashboard_id: DashboardId,
    pub owner_kind: OwnerKind,
    pub owner_id: String,
    pub panels: Vec<Panel>,
    pub visibility: Visibility,
}

fn field_panels(device: &Device) -> Vec<Panel> {
    device
        .known_fields
        .values()
        .map(|f| Panel {
            title: format!("{} {}", device.device_id, f.fieldname),
            query: PanelQuery {
                selector: Selector::new().tag(TAG_DEVICE_ID, device.device_id.as_str()).tag(TAG_FIELDNAME, &f.fieldname),
                agg: Aggregate::Mean,
                every_s: Some(f.expected_interval_s.unwrap_or(DEFAULT_PANEL_EVERY_S)),
            },
            lookback_s: DEFAULT_LOOKBACK_S,
            render_hint: RenderHint::Timeseries,
        })
        .collect()
}

/// One timeseries panel per known field, pinned to the device. Public.
pub fn device_dashboard(device: &Device) -> Dashboard {
    Dashboard {
        dashboard_id: DashboardId::generate(),
        owner_kind: OwnerKind::Device,
        owner_id: device.device_id.to_string(),
        panels: field_panels(device),
        visibility: Visibility::Public,
    }
}

/// Panels for every field of every nearby device. Private.
pub fn member_dashboard(member: &MemberId, nearby: &[&Device]) -> Dashboard {
    Dashboard {
        dashboard_id: DashboardId::generate(),
        owner_kind: OwnerKind::Member,
        owner_id: member.to_string(),
        panels: nearby.iter().flat_map(|d| field_panels(d)).collect(),
        visibility: Visibility::Private,
    }
}

/// Whether a panel's predicates stay inside what the owner may see: the
/// owning device for device dashboards, some registered device (and one of
/// its declared fields, when pinned) for member dashboards.
pub fn panel_in_scope(owner_kind: OwnerKind, owner_id: &str, panel: &Panel, devices: &DeviceRegistry) -> bool {
    let Some(device_id) = panel.query.selector.get(TAG_DEVICE_ID) else {
        return false;
    };
    if owner_kind == OwnerKind::Device && device_id != owner_id {
        return false;
    }
    let Ok(device) = devices.get(&DeviceId::from(device_id)) else {
        return false;
    };
    panel.query.selector.get(TAG_FIELDNAME).is_none_or(|f| device.known_fields.contains_key(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPanel {
    pub title: String,
    pub render_hint: RenderHint,
    /// The predicates actually executed.
    pub selector: Selector,
    #[serde(with = "serde_ms")]
    pub from: Timestamp,
    #[serde(with = "serde_ms")]
    pub to: Timestamp,
    pub points: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedDashboard {
    pub dashboard_id: DashboardId,
    pub owner_kind: OwnerKind,
    pub owner_id: String,
    pub visibility: Visibility,
    #[serde(with = "serde_ms")]
    pub generated_at: Timestamp,
    pub panels: Vec<RenderedPanel>,
}

/// Executes each panel over `[now - lookback, now)`. Out-of-scope panels are
/// reported with an error and never queried.
pub fn render(dashboard: &Dashboard, store: &TsStore, devices: &DeviceRegistry, now: Timestamp) -> RenderedDashboard {
    let panels = dashboard
        .panels
        .iter()
        .map(|panel| {
            let from = now - chrono::Duration::milliseconds((panel.lookback_s * 1000.0).round() as i64);
            let mut rendered = RenderedPanel {
                title: panel.title.clone(),
                render_hint: panel.render_hint,
                selector: panel.query.selector.clone(),
                from,
                to: now,
                points: Vec::new(),
                error: None,
            };
            if !panel_in_scope(dashboard.owner_kind, &dashboard.owner_id, panel, devices) {
                rendered.error = Some("panel query escapes the dashboard owner's scope".into());
                return rendered;
            }
            let q = Query { selector: panel.query.selector.clone(), from, to: now, agg: panel.query.agg, every_s: panel.query.every_s };
            match store.query(&q) {
                Ok(series) => rendered.points = series.points,
                Err(e) => rendered.error = Some(e.to_string()),
            }
            rendered
        })
        .collect();
    RenderedDashboard {
        dashboard_id: dashboard.dashboard_id.clone(),
        owner_kind: dashboard.owner_kind,
        owner_id: dashboard.owner_id.clone(),
        visibility: dashboard.visibility,
        generated_at: now,
        panels,
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Dashboards {
    dashboards: BTreeMap<DashboardId, Dashboard>,
}

impl Dashboards {
    pub fn insert(&mut self, dashboard: Dashboard) -> Result<Dashboard> {
        if self.by_owner(dashboard.owner_kind, &dashboard.owner_id).is_some() {
            return Err(Error::AlreadyExists(format!("{:?} {}", dashboard.owner_kind, dashboard.owner_id)));
        }
        self.dashboards.insert(dashboard.dashboard_id.clone(), dashboard.clone());
        Ok(dashboard)
    }

    pub fn get(&self, id: &DashboardId) -> Result<&Dashboard> {
        self.dashboards.get(id).ok_or_else(|| Error::not_found("dashboard", id.as_str()))
    }

    pub fn by_owner(&self, kind: OwnerKind, owner_id: &str) -> Option<&Dashboard> {
        self.dashboards.values().find(|d| d.owner_kind == kind && d.owner_id == owner_id)
    }

    pub fn remove_by_owner(&mut self, kind: OwnerKind, owner_id: &str) -> Option<Dashboard> {
        let id = self.by_owner(kind, owner_id)?.dashboard_id.clone();
        self.dashboards.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.dashboards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dashboards.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dashboard> {
        self.dashboards.values()
    }

    pub fn update(
        &mut self,
        id: &DashboardId,
        panels: Option<Vec<Panel>>,
        visibility: Option<Visibility>,
        devices: &DeviceRegistry,
    ) -> Result<Dashboard> {
        let d = self.dashboards.get_mut(id).ok_or_else(|| Error::not_found("dashboard", id.as_str()))?;
        if let Some(panels) = panels {
            if let Some(bad) = panels.iter().find(|p| !panel_in_scope(d.owner_kind, &d.owner_id, p, devices)) {
                return Err(Error::InvalidArgument(format!("panel {:?} queries outside the owner's scope", bad.title)));
            }
            d.panels = panels;
        }
        if let Some(v) = visibility {
            d.visibility = v;
        }
        Ok(d.clone())
    }
}
