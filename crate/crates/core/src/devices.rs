//! Device registry: immutable tags, declared field schemas and the ingestion
//! schema check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floorplan::{FloorPlan, GridCell};
use crate::ids::{DeviceId, MemberId, PlanId};
use crate::tsstore::{RejectReason, SchemaCheck, TagSet};

pub const DEFAULT_SYSTEM_VERSION: &str = "lll-1.0.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Real,
    Integer,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub fieldname: String,
    pub value_kind: ValueKind,
    #[serde(default)]
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_valid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_valid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_interval_s: Option<f64>,
}

impl FieldSpec {
    pub fn new(fieldname: impl Into<String>, value_kind: ValueKind) -> Self {
        FieldSpec {
            fieldname: fieldname.into(),
            value_kind,
            unit: String::new(),
            min_valid: None,
            max_valid: None,
            expected_interval_s: None,
        }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.min_valid = Some(min);
        self.max_valid = Some(max);
        self
    }

    pub fn with_interval(mut self, seconds: f64) -> Self {
        self.expected_interval_s = Some(seconds);
        self
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = unit.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fieldname.trim().is_empty() {
            return Err(Error::InvalidFieldSpec("fieldname must not be empty".into()));
        }
        if let (Some(lo), Some(hi)) = (self.min_valid, self.max_valid) {
            if !(lo < hi) {
                return Err(Error::InvalidFieldSpec(format!("{}: min_valid {lo} must be below max_valid {hi}", self.fieldname)));
            }
        }
        if let Some(iv) = self.expected_interval_s {
            if !(iv.is_finite() && iv > 0.0) {
                return Err(Error::InvalidFieldSpec(format!("{}: expected_interval_s must be positive", self.fieldname)));
            }
        }
        Ok(())
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        Some((self.min_valid?, self.max_valid?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Active,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub device_id: DeviceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<MemberId>,
    pub location_general: String,
    pub location_specific: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<PlanId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<GridCell>,
    /// Keyed by fieldname, so serialized order is stable.
    pub known_fields: BTreeMap<String, FieldSpec>,
    pub system_version: String,
    pub status: DeviceStatus,
    /// Bumped on every tag change.
    pub version: u64,
}

impl Device {
    pub fn is_active(&self) -> bool {
        self.status == DeviceStatus::Active
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.known_fields.get(name)
    }

    pub fn fieldnames(&self) -> BTreeSet<String> {
        self.known_fields.keys().cloned().collect()
    }

    /// The current tag set a point from this device carries for `fieldname`.
    pub fn tags_for(&self, fieldname: &str) -> TagSet {
        TagSet::new(
            self.device_id.as_str(),
            &self.location_general,
            &self.location_specific,
            fieldname,
            &self.system_version,
        )
    }
}

/// Registration request.
#[derive(Debug, Clone, Deserialize)]
pub struct DeviceSpec {
    pub device_id: String,
    #[serde(default)]
    pub owner: Option<MemberId>,
    #[serde(default)]
    pub location_general: Option<String>,
    #[serde(default)]
    pub location_specific: Option<String>,
    #[serde(default)]
    pub plan_id: Option<PlanId>,
    #[serde(default)]
    pub cell: Option<GridCell>,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub system_version: Option<String>,
}

impl DeviceSpec {
    pub fn new(device_id: impl Into<String>, fields: Vec<FieldSpec>) -> Self {
        DeviceSpec {
            device_id: device_id.into(),
            owner: None,
            location_general: None,
            location_specific: None,
            plan_id: None,
            cell: None,
            fields,
            system_version: None,
        }
    }

    pub fn placed(mut self, plan_id: PlanId, cell: GridCell) -> Self {
        self.plan_id = Some(plan_id);
        self.cell = Some(cell);
        self
    }
}

fn valid_device_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct DeviceRegistry {
    devices: BTreeMap<DeviceId, Device>,
}

impl DeviceRegistry {
    /// Builds and stores a device. `plan` must be the plan named in the spec,
    /// if any.
    pub fn register(&mut self, spec: DeviceSpec, plan: Option<&FloorPlan>, default_version: &str) -> Result<Device> {
        if !valid_device_id(&spec.device_id) {
            return Err(Error::InvalidArgument(format!(
                "device_id must be a lowercase hex string or slug, got {:?}",
                spec.device_id
            )));
        }
        let id = DeviceId::from(spec.device_id.as_str());
        if self.devices.contains_key(&id) {
            return Err(Error::DuplicateDeviceId(spec.device_id));
        }
        if spec.fields.is_empty() {
            return Err(Error::EmptyFieldSchema);
        }
        let mut known_fields = BTreeMap::new();
        for f in spec.fields {
            f.validate()?;
            known_fields.insert(f.fieldname.clone(), f);
        }
        let (location_general, location_specific, cell) = match (plan, spec.cell) {
            (Some(plan), Some(cell)) => {
                plan.check(cell)?;
                (spec.location_general.unwrap_or_else(|| plan.name.clone()), plan.label(cell), Some(cell))
            }
            (Some(plan), None) => (
                spec.location_general.unwrap_or_else(|| plan.name.clone()),
                spec.location_specific.unwrap_or_default(),
                None,
            ),
            (None, Some(_)) => return Err(Error::InvalidArgument("cell given without plan_id".into())),
            (None, None) => (spec.location_general.unwrap_or_default(), spec.location_specific.unwrap_or_default(), None),
        };
        let device = Device {
            device_id: id.clone(),
            owner: spec.owner,
            location_general,
            location_specific,
            plan_id: plan.map(|p| p.plan_id.clone()),
            cell,
            known_fields,
            system_version: spec.system_version.unwrap_or_else(|| default_version.to_owned()),
            status: DeviceStatus::Active,
            version: 1,
        };
        self.devices.insert(id, device.clone());
        Ok(device)
    }

    pub fn get(&self, id: &DeviceId) -> Result<&Device> {
        self.devices.get(id).ok_or_else(|| Error::not_found("device", id.as_str()))
    }

    pub fn devices(&self) -> impl Iterator<Item = &Device> {
        self.devices.values()
    }

    pub fn active(&self) -> impl Iterator<Item = &Device> {
        self.devices.values().filter(|d| d.is_active())
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    /// Declared field names, ordered by name. Retired devices keep their
    /// last declared set.
    pub fn list_known_fields(&self, id: &DeviceId) -> Result<BTreeSet<String>> {
        Ok(self.get(id)?.fieldnames())
    }

    /// Moves a device. Returns the device and whether anything changed.
    pub fn move_device(&mut self, id: &DeviceId, plan: &FloorPlan, cell: GridCell) -> Result<(Device, bool)> {
        plan.check(cell)?;
        let device = self.devices.get_mut(id).ok_or_else(|| Error::not_found("device", id.as_str()))?;
        if device.plan_id.as_ref() == Some(&plan.plan_id) && device.cell == Some(cell) {
            return Ok((device.clone(), false));
        }
        if device.plan_id.as_ref() != Some(&plan.plan_id) {
            device.location_general = plan.name.clone();
        }
        device.plan_id = Some(plan.plan_id.clone());
        device.cell = Some(cell);
        device.location_specific = plan.label(cell);
        device.version += 1;
        Ok((device.clone(), true))
    }

    pub fn retire(&mut self, id: &DeviceId) -> Result<Device> {
        let device = self.devices.get_mut(id).ok_or_else(|| Error::not_found("device", id.as_str()))?;
        device.status = DeviceStatus::Retired;
        Ok(device.clone())
    }

    /// `(device, plan, cell)` for every active, placed device.
    pub fn located(&self) -> impl Iterator<Item = (&DeviceId, &PlanId, GridCell)> {
        self.active().filter_map(|d| Some((&d.device_id, d.plan_id.as_ref()?, d.cell?)))
    }
}

impl SchemaCheck for DeviceRegistry {
    fn check(&self, tags: &TagSet) -> std::result::Result<(), RejectReason> {
        let device = self
            .devices
            .get(&DeviceId::from(tags.device_id()))
            .ok_or(RejectReason::UnknownDevice)?;
        if !device.is_active() {
            return Err(RejectReason::RetiredDevice);
        }
        if !device.known_fields.contains_key(tags.fieldname()) {
            return Err(RejectReason::UnknownField);
        }
        Ok(())
    }

    fn complete(&self, tags: &mut TagSet) {
        if let Some(device) = self.devices.get(&DeviceId::from(tags.device_id())) {
            tags.fill_missing(&device.location_general, &device.location_specific, &device.system_version);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> DeviceSpec {
        DeviceSpec::new(
            "503eaa71b92a",
            vec![FieldSpec::new("heartbeat", ValueKind::Integer), FieldSpec::new("counter", ValueKind::Integer)],
        )
    }

    #[test]
    fn register_places_device_on_grid() {
        let plan = FloorPlan::new("Link Lab", 1.0, 10, 10).unwrap();
        let mut reg = DeviceRegistry::default();
        let d = reg
            .register(canonical().placed(plan.plan_id.clone(), GridCell::new(5, 0)), Some(&plan), DEFAULT_SYSTEM_VERSION)
            .unwrap();
        assert_eq!(d.location_general, "Link Lab");
        assert_eq!(d.location_specific, "grid_5");
        assert_eq!(d.system_version, "lll-1.0.0");
        let names: Vec<_> = reg.list_known_fields(&d.device_id).unwrap().into_iter().collect();
        assert_eq!(names, ["counter", "heartbeat"]);
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let mut reg = DeviceRegistry::default();
        reg.register(canonical(), None, DEFAULT_SYSTEM_VERSION).unwrap();
        assert!(matches!(reg.register(canonical(), None, DEFAULT_SYSTEM_VERSION), Err(Error::DuplicateDeviceId(_))));
        let empty = DeviceSpec::new("abc", vec![]);
        assert!(matches!(reg.register(empty, None, DEFAULT_SYSTEM_VERSION), Err(Error::EmptyFieldSchema)));
    }

    #[test]
    fn range_spec_validated() {
        let lux = FieldSpec::new("lux", ValueKind::Real).with_range(0.0, 100_000.0);
        assert_eq!(lux.range(), Some((0.0, 100_000.0)));
        let bad = FieldSpec::new("lux", ValueKind::Real).with_range(5.0, 5.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn move_is_idempotent_and_bounded() {
        let plan = FloorPlan::new("Link Lab", 1.0, 10, 10).unwrap();
        let mut reg = DeviceRegistry::default();
        let d = reg
            .register(canonical().placed(plan.plan_id.clone(), GridCell::new(5, 0)), Some(&plan), DEFAULT_SYSTEM_VERSION)
            .unwrap();
        let (moved, changed) = reg.move_device(&d.device_id, &plan, GridCell::new(7, 1)).unwrap();
        assert!(changed);
        assert_eq!(moved.location_specific, "grid_17");
        assert_eq!(moved.version, 2);
        let (same, changed) = reg.move_device(&d.device_id, &plan, GridCell::new(7, 1)).unwrap();
        assert!(!changed);
        assert_eq!(same.version, 2);
        assert!(matches!(reg.move_device(&d.device_id, &plan, GridCell::new(99, 99)), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn retired_device_keeps_schema() {
        let mut reg = DeviceRegistry::default();
        let d = reg.register(canonical(), None, DEFAULT_SYSTEM_VERSION).unwrap();
        reg.retire(&d.device_id).unwrap();
        assert_eq!(reg.list_known_fields(&d.device_id).unwrap().len(), 2);
        assert!(matches!(reg.list_known_fields(&DeviceId::from("nope")), Err(Error::NotFound { .. })));
    }

    #[test]
    fn device_ids_must_be_slugs() {
        let mut reg = DeviceRegistry::default();
        let spec = DeviceSpec::new("Bad Id", vec![FieldSpec::new("x", ValueKind::Real)]);
        assert!(matches!(reg.register(spec, None, DEFAULT_SYSTEM_VERSION), Err(Error::InvalidArgument(_))));
    }
}
