//! The platform: every module behind one authorization point.
//!
//! Each public operation takes the acting [`Principal`], performs exactly one
//! authorization check (recorded in the audit log) and only then touches
//! state. Metadata lives behind one lock and is snapshotted to
//! `metadata.json`; telemetry, survey responses and the outbox each have their
//! own store.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono_tz::Tz;
use parking_lot::{Mutex, RwLock, RwLockWriteGuard};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::{serde_ms, truncate_ms, Clock, SystemClock, Timestamp};
use crate::config::{Module, ServiceConfig};
use crate::dashboards::{self, Dashboard, Dashboards, OwnerKind, Panel, RenderedDashboard, Visibility};
use crate::devices::{Device, DeviceRegistry, DeviceSpec};
use crate::error::{Error, Result};
use crate::faultwatch::{self, FaultClass, FaultLog, FaultReport, SweepContext, Window};
use crate::floorplan::{FloorPlan, Floorplans, GridCell, SeatAssignment};
use crate::ids::{AssignmentId, DashboardId, DeviceId, MemberId, PlanId, SeatId, TemplateId};
use crate::registry::{
    Action, Decision, Descriptor, Member, NewMember, Permission, Principal, Registry, ResourceKind, Role, TokenStore,
};
use crate::surveys::{
    AnonymousResponse, Cadence, ComplianceFilter, ComplianceRow, MockProvider, Outbox, OutboxEntry, ResponseStore,
    SurveyAssignment, SurveyProvider, SurveyTemplate, Surveys,
};
use crate::tsstore::{DataPoint, IngestReceipt, Query, Selector, Series, TsStore};

pub const METADATA_FILE: &str = "metadata.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const OUTBOX_FILE: &str = "outbox.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    #[serde(with = "serde_ms")]
    pub at: Timestamp,
    pub actor: String,
    pub operation: String,
    pub action: Action,
    pub resource: ResourceKind,
    pub decision: Decision,
}

/// Everything removed by a member deletion, besides the member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionReceipt {
    pub member_id: MemberId,
    pub dashboards: Vec<DashboardId>,
    pub seats: Vec<SeatId>,
    pub survey_assignments: Vec<AssignmentId>,
}

impl DeletionReceipt {
    pub fn downstream_count(&self) -> usize {
        self.dashboards.len() + self.seats.len() + self.survey_assignments.len()
    }
}

/// A member's own records, for self-service export.
#[derive(Debug, Clone, Serialize)]
pub struct MemberExport {
    pub member: Member,
    pub seats: Vec<SeatAssignment>,
    pub survey_assignments: Vec<SurveyAssignment>,
    pub dashboard: Option<Dashboard>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleStatus {
    pub module: Module,
    pub enabled: bool,
    pub status: &'static str,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Meta {
    registry: Registry,
    plans: Floorplans,
    devices: DeviceRegistry,
    surveys: Surveys,
    dashboards: Dashboards,
    faults: FaultLog,
}

pub struct Lab {
    config: ServiceConfig,
    tz: Tz,
    clock: Arc<dyn Clock>,
    meta: RwLock<Meta>,
    store: TsStore,
    responses: ResponseStore,
    outbox: Outbox,
    provider: Box<dyn SurveyProvider>,
    tokens: Mutex<TokenStore>,
    audit: Mutex<Vec<AuditEntry>>,
    meta_path: Option<PathBuf>,
}

impl std::fmt::Debug for Lab {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lab").field("data_dir", &self.config.data_dir).field("store", &self.store).finish_non_exhaustive()
    }
}

impl Lab {
    pub fn open(config: ServiceConfig) -> Result<Lab> {
        Lab::with_clock(config, Arc::new(SystemClock))
    }

    /// In-memory platform with default configuration.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Lab {
        Lab::with_clock(ServiceConfig::default(), clock).expect("default configuration is valid")
    }

    pub fn with_clock(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Lab> {
        config.validate()?;
        let tz = config.timezone()?;
        let (meta, store, responses, outbox, meta_path) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let meta_path = dir.join(METADATA_FILE);
                let meta = load_meta(&meta_path)?;
                let store = TsStore::open(dir.join("telemetry"), config.sync_writes)?;
                (meta, store, ResponseStore::open(dir.join(RESPONSES_FILE))?, Outbox::open(dir.join(OUTBOX_FILE))?, Some(meta_path))
            }
            None => (Meta::default(), TsStore::in_memory(), ResponseStore::in_memory(), Outbox::in_memory(), None),
        };
        let lab = Lab {
            config,
            tz,
            clock,
            meta: RwLock::new(meta),
            store,
            responses,
            outbox,
            provider: Box::new(MockProvider),
            tokens: Mutex::new(TokenStore::default()),
            audit: Mutex::new(Vec::new()),
            meta_path,
        };
        lab.bootstrap()?;
        Ok(lab)
    }

    /// Replaces the survey distribution adapter.
    pub fn set_provider(&mut self, provider: Box<dyn SurveyProvider>) {
        self.provider = provider;
    }

    fn bootstrap(&self) -> Result<()> {
        let now = self.now();
        let mut meta = self.meta.write();
        let mut changed = false;
        if let Some(admin) = &self.config.bootstrap_admin {
            if meta.registry.by_username(&admin.username).is_none() {
                let spec = NewMember {
                    username: admin.username.clone(),
                    email: admin.email.clone(),
                    display_name: admin.username.clone(),
                    role: Role::Admin,
                    descriptor: Descriptor::Researcher,
                    password: Some(admin.password.clone()),
                };
                let m = meta.registry.insert(spec, now)?;
                tracing::info!(member = %m.member_id, "created bootstrap admin");
                changed = true;
            }
        }
        if self.config.is_enabled(Module::Dashboards) {
            changed |= self.backfill_dashboards(&mut meta)?;
        }
        if changed {
            self.persist(&meta)?;
        }
        Ok(())
    }

    /// Creates any missing member or device dashboard.
    fn backfill_dashboards(&self, meta: &mut Meta) -> Result<bool> {
        let mut missing = Vec::new();
        for m in meta.registry.members() {
            if meta.dashboards.by_owner(OwnerKind::Member, m.member_id.as_str()).is_none() {
                missing.push(self.seed_member_dashboard(meta, &m.member_id));
            }
        }
        for d in meta.devices.active() {
            if meta.dashboards.by_owner(OwnerKind::Device, d.device_id.as_str()).is_none() {
                missing.push(dashboards::device_dashboard(d));
            }
        }
        let changed = !missing.is_empty();
        for d in missing {
            meta.dashboards.insert(d)?;
        }
        Ok(changed)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn timezone(&self) -> Tz {
        self.tz
    }

    pub fn now(&self) -> Timestamp {
        truncate_ms(self.clock.now())
    }

    pub fn store(&self) -> &TsStore {
        &self.store
    }

    pub fn responses(&self) -> &ResponseStore {
        &self.responses
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.audit.lock().clone()
    }

    pub fn health(&self) -> Vec<ModuleStatus> {
        Module::ALL
            .into_iter()
            .map(|module| {
                let enabled = self.config.is_enabled(module);
                ModuleStatus { module, enabled, status: if enabled { "ok" } else { "disabled" } }
            })
            .collect()
    }

    /// The single authorization point. Records the decision, then fails on
    /// deny.
    fn check(&self, actor: &Principal, operation: &str, action: Action, resource: ResourceKind) -> Result<()> {
        let decision = actor.decide(Permission::new(action, resource));
        let mut audit = self.audit.lock();
        let entry = AuditEntry {
            seq: audit.len() as u64,
            at: self.now(),
            actor: actor.to_string(),
            operation: operation.to_owned(),
            action,
            resource,
            decision,
        };
        tracing::info!(actor = %entry.actor, operation, ?action, ?resource, ?decision, "authorize");
        audit.push(entry);
        match decision {
            Decision::Allow => Ok(()),
            Decision::Deny => Err(Error::PermissionDenied(format!("{actor} may not {operation}"))),
        }
    }

    /// Like [`Lab::check`], with a member-ownership requirement: the
    /// operation is allowed only on the actor's own records.
    fn check_own(&self, actor: &Principal, owner: &MemberId, operation: &str, action: Action, resource: ResourceKind) -> Result<()> {
        self.check(actor, operation, action, resource)?;
        if actor.member_id() != Some(owner) {
            return Err(Error::PermissionDenied(format!("{operation} is limited to the member's own records")));
        }
        Ok(())
    }

    fn persist(&self, meta: &Meta) -> Result<()> {
        let Some(path) = &self.meta_path else { return Ok(()) };
        let tmp = path.with_extension("json.tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(&f);
            serde_json::to_writer(&mut w, meta)?;
            std::io::Write::flush(&mut w)?;
            drop(w);
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn commit<T>(&self, meta: RwLockWriteGuard<'_, Meta>, value: T) -> Result<T> {
        self.persist(&meta)?;
        Ok(value)
    }

    // ---- accounts ----

    /// Exchanges credentials for a bearer token.
    pub fn login(&self, username: &str, password: &str) -> Result<(String, Member)> {
        let meta = self.meta.read();
        let member = meta
            .registry
            .verify_login(username, password)
            .filter(|m| m.active)
            .ok_or_else(|| Error::PermissionDenied("invalid credentials".into()))?
            .clone();
        let expires = self.now() + chrono::Duration::seconds(self.config.token_ttl_s);
        let token = self.tokens.lock().issue(member.member_id.clone(), expires);
        Ok((token, member))
    }

    /// Resolves a bearer token. Unknown, expired or inactive-member tokens
    /// degrade to anonymous.
    pub fn authenticate(&self, token: Option<&str>) -> Principal {
        let Some(token) = token else { return Principal::Anonymous };
        let Some(id) = self.tokens.lock().resolve(token, self.now()).cloned() else {
            return Principal::Anonymous;
        };
        match self.meta.read().registry.get(&id) {
            Ok(m) if m.active => m.principal(),
            _ => Principal::Anonymous,
        }
    }

    /// Issues a token for a member without a password check. For embedding
    /// and tests.
    pub fn issue_token(&self, member_id: &MemberId) -> Result<String> {
        self.meta.read().registry.get(member_id)?;
        let expires = self.now() + chrono::Duration::seconds(self.config.token_ttl_s);
        Ok(self.tokens.lock().issue(member_id.clone(), expires))
    }

    /// Creates the first admin of an empty registry. Fails once any member
    /// exists.
    pub fn create_first_admin(&self, spec: NewMember) -> Result<Member> {
        let now = self.now();
        let mut meta = self.meta.write();
        if !meta.registry.is_empty() {
            return Err(Error::PermissionDenied("registry already has members".into()));
        }
        let member = meta.registry.insert(NewMember { role: Role::Admin, ..spec }, now)?;
        if self.config.is_enabled(Module::Dashboards) {
            let d = self.seed_member_dashboard(&meta, &member.member_id);
            meta.dashboards.insert(d)?;
        }
        self.commit(meta, member)
    }

    pub fn create_member(&self, actor: &Principal, spec: NewMember) -> Result<Member> {
        self.check(actor, "create_member", Action::CreateModel, ResourceKind::Member)?;
        let now = self.now();
        let mut meta = self.meta.write();
        let member = meta.registry.insert(spec, now)?;
        if self.config.is_enabled(Module::Dashboards) {
            let d = self.seed_member_dashboard(&meta, &member.member_id);
            meta.dashboards.insert(d)?;
        }
        self.commit(meta, member)
    }

    /// Deletes a member and everything hanging off it: dashboard, seats and
    /// survey assignments. Devices, plans and templates are untouched.
    pub fn delete_member(&self, actor: &Principal, target: &MemberId) -> Result<DeletionReceipt> {
        self.check(actor, "delete_member", Action::DeleteModel, ResourceKind::Member)?;
        let mut meta = self.meta.write();
        meta.registry.get(target)?;
        let dashboards: Vec<DashboardId> =
            meta.dashboards.remove_by_owner(OwnerKind::Member, target.as_str()).map(|d| d.dashboard_id).into_iter().collect();
        let seats = meta.plans.remove_member_seats(target);
        let survey_assignments = meta.surveys.remove_member(target);
        meta.registry.remove(target)?;
        self.tokens.lock().revoke_member(target);
        let receipt = DeletionReceipt { member_id: target.clone(), dashboards, seats, survey_assignments };
        tracing::info!(member = %target, downstream = receipt.downstream_count(), "member deleted");
        self.commit(meta, receipt)
    }

    pub fn set_role(&self, actor: &Principal, target: &MemberId, role: Role) -> Result<Member> {
        self.check(actor, "set_role", Action::CreateModel, ResourceKind::Member)?;
        let mut meta = self.meta.write();
        let m = meta.registry.set_role(target, role)?;
        self.commit(meta, m)
    }

    /// Soft alternative to deletion: the account stays, its tokens stop
    /// working.
    pub fn set_active(&self, actor: &Principal, target: &MemberId, active: bool) -> Result<Member> {
        self.check(actor, "set_active", Action::DeleteModel, ResourceKind::Member)?;
        let mut meta = self.meta.write();
        let m = meta.registry.set_active(target, active)?;
        if !active {
            self.tokens.lock().revoke_member(target);
        }
        self.commit(meta, m)
    }

    pub fn members(&self, actor: &Principal) -> Result<Vec<Member>> {
        self.check(actor, "list_members", Action::ReadCompliance, ResourceKind::Member)?;
        Ok(self.meta.read().registry.members().cloned().collect())
    }

    pub fn member(&self, id: &MemberId) -> Result<Member> {
        self.meta.read().registry.get(id).cloned()
    }

    pub fn me(&self, actor: &Principal) -> Result<Member> {
        let id = actor.member_id().cloned().ok_or_else(|| Error::PermissionDenied("not signed in".into()))?;
        self.check_own(actor, &id, "read_me", Action::ReadOwnData, ResourceKind::Member)?;
        self.member(&id)
    }

    /// Replaces the actor's secret salt. Anonymous ids of all the member's
    /// assignments are re-derived, so responses stored under the old ids are
    /// orphaned.
    pub fn rotate_secret(&self, actor: &Principal, target: &MemberId) -> Result<Member> {
        self.check_own(actor, target, "rotate_secret", Action::ReadOwnData, ResourceKind::Member)?;
        let mut meta = self.meta.write();
        let m = meta.registry.rotate_secret(target)?;
        meta.surveys.rekey_member(&m);
        self.commit(meta, m)
    }

    pub fn change_password(&self, actor: &Principal, target: &MemberId, password: &str) -> Result<Member> {
        self.check_own(actor, target, "change_password", Action::ReadOwnData, ResourceKind::Member)?;
        let mut meta = self.meta.write();
        meta.registry.set_password(target, password)?;
        let m = meta.registry.rotate_secret(target)?;
        meta.surveys.rekey_member(&m);
        self.commit(meta, m)
    }

    pub fn export_own_data(&self, actor: &Principal) -> Result<MemberExport> {
        let id = actor.member_id().cloned().ok_or_else(|| Error::PermissionDenied("not signed in".into()))?;
        self.check_own(actor, &id, "export_own_data", Action::ReadOwnData, ResourceKind::Member)?;
        let meta = self.meta.read();
        Ok(MemberExport {
            member: meta.registry.get(&id)?.clone(),
            seats: meta.plans.seats_of(&id).cloned().collect(),
            survey_assignments: meta.surveys.assignments_of(&id).cloned().collect(),
            dashboard: meta.dashboards.by_owner(OwnerKind::Member, id.as_str()).cloned(),
        })
    }

    // ---- floor plans ----

    pub fn create_floorplan(&self, actor: &Principal, name: &str, cell_size_m: f64, cols: u32, rows: u32) -> Result<FloorPlan> {
        self.check(actor, "create_floorplan", Action::WriteDeviceMetadata, ResourceKind::Floorplan)?;
        let plan = FloorPlan::new(name, cell_size_m, cols, rows)?;
        let mut meta = self.meta.write();
        let plan = meta.plans.insert_plan(plan);
        self.commit(meta, plan)
    }

    pub fn floorplans(&self, actor: &Principal) -> Result<Vec<FloorPlan>> {
        self.check(actor, "list_floorplans", Action::ReadPublic, ResourceKind::Floorplan)?;
        Ok(self.meta.read().plans.plans().cloned().collect())
    }

    pub fn snap_to_grid(&self, actor: &Principal, plan_id: &PlanId, x_m: f64, y_m: f64) -> Result<GridCell> {
        self.check(actor, "snap_to_grid", Action::ReadPublic, ResourceKind::Floorplan)?;
        self.meta.read().plans.plan(plan_id)?.snap_to_grid(x_m, y_m)
    }

    /// Seats a member. Their dashboard is reseeded from the devices now in
    /// range.
    pub fn assign_seat(
        &self,
        actor: &Principal,
        member_id: &MemberId,
        plan_id: &PlanId,
        cell: GridCell,
        valid_from: Option<Timestamp>,
        valid_to: Option<Timestamp>,
    ) -> Result<SeatAssignment> {
        self.check(actor, "assign_seat", Action::WriteDeviceMetadata, ResourceKind::Seat)?;
        let valid_from = valid_from.unwrap_or_else(|| self.now());
        let mut meta = self.meta.write();
        meta.registry.get(member_id)?;
        let seat = meta.plans.assign_seat(member_id.clone(), plan_id.clone(), cell, valid_from, valid_to)?;
        if self.config.is_enabled(Module::Dashboards) {
            self.reseed_member_dashboard(&mut meta, member_id);
        }
        self.commit(meta, seat)
    }

    pub fn end_seat(&self, actor: &Principal, seat_id: &SeatId, at: Option<Timestamp>) -> Result<SeatAssignment> {
        self.check(actor, "end_seat", Action::WriteDeviceMetadata, ResourceKind::Seat)?;
        let at = at.unwrap_or_else(|| self.now());
        let mut meta = self.meta.write();
        let seat = meta.plans.end_seat(seat_id, at)?;
        self.commit(meta, seat)
    }

    /// Devices within `radius_m` of the member's open seats. Members may
    /// ask about themselves; staff about anyone.
    pub fn nearby_devices(&self, actor: &Principal, member_id: &MemberId, radius_m: f64) -> Result<Vec<DeviceId>> {
        if actor.member_id() == Some(member_id) {
            self.check(actor, "nearby_devices", Action::ReadOwnData, ResourceKind::Seat)?;
        } else {
            self.check(actor, "nearby_devices", Action::WriteDeviceMetadata, ResourceKind::Seat)?;
        }
        if !(radius_m.is_finite() && radius_m >= 0.0) {
            return Err(Error::InvalidArgument("radius_m must be a non-negative number".into()));
        }
        let meta = self.meta.read();
        meta.registry.get(member_id)?;
        meta.plans.devices_within_radius(member_id, radius_m, meta.devices.located())
    }

    fn seed_member_dashboard(&self, meta: &Meta, member_id: &MemberId) -> Dashboard {
        let nearby = meta
            .plans
            .devices_within_radius(member_id, self.config.dashboards.default_radius_m, meta.devices.located())
            .unwrap_or_default();
        let devices: Vec<&Device> = nearby.iter().filter_map(|id| meta.devices.get(id).ok()).filter(|d| d.is_active()).collect();
        dashboards::member_dashboard(member_id, &devices)
    }

    fn reseed_member_dashboard(&self, meta: &mut Meta, member_id: &MemberId) {
        let fresh = self.seed_member_dashboard(meta, member_id);
        let existing = meta.dashboards.by_owner(OwnerKind::Member, member_id.as_str()).map(|d| d.dashboard_id.clone());
        match existing {
            Some(id) => {
                let _ = meta.dashboards.update(&id, Some(fresh.panels), None, &meta.devices);
            }
            None => {
                let _ = meta.dashboards.insert(fresh);
            }
        }
    }

    /// Reseeds every member dashboard from current seat proximity.
    pub fn refresh_member_dashboards(&self, actor: &Principal) -> Result<usize> {
        self.config.require(Module::Dashboards)?;
        self.check(actor, "refresh_member_dashboards", Action::WriteDeviceMetadata, ResourceKind::Dashboard)?;
        self.reseed_all_member_dashboards()
    }

    /// Entry point for the scheduled proximity refresh.
    pub fn reseed_all_member_dashboards(&self) -> Result<usize> {
        self.config.require(Module::Dashboards)?;
        let mut meta = self.meta.write();
        let ids: Vec<MemberId> = meta.registry.members().map(|m| m.member_id.clone()).collect();
        for id in &ids {
            self.reseed_member_dashboard(&mut meta, id);
        }
        self.commit(meta, ids.len())
    }

    // ---- devices ----

    pub fn register_device(&self, actor: &Principal, spec: DeviceSpec) -> Result<Device> {
        self.check(actor, "register_device", Action::WriteDeviceMetadata, ResourceKind::Device)?;
        let mut meta = self.meta.write();
        let plan = match &spec.plan_id {
            Some(p) => Some(meta.plans.plan(p)?.clone()),
            None => None,
        };
        if let Some(owner) = &spec.owner {
            meta.registry.get(owner)?;
        }
        let device = meta.devices.register(spec, plan.as_ref(), &self.config.default_system_version)?;
        if self.config.is_enabled(Module::Dashboards) {
            meta.dashboards.insert(dashboards::device_dashboard(&device))?;
        }
        self.commit(meta, device)
    }

    pub fn move_device(&self, actor: &Principal, id: &DeviceId, plan_id: &PlanId, cell: GridCell) -> Result<Device> {
        self.check(actor, "move_device", Action::WriteDeviceMetadata, ResourceKind::Device)?;
        let mut meta = self.meta.write();
        let plan = meta.plans.plan(plan_id)?.clone();
        let (device, changed) = meta.devices.move_device(id, &plan, cell)?;
        if !changed {
            return Ok(device);
        }
        self.commit(meta, device)
    }

    /// Retires a device and deletes its dashboard. Stored points stay.
    pub fn retire_device(&self, actor: &Principal, id: &DeviceId) -> Result<Device> {
        self.check(actor, "retire_device", Action::DeleteModel, ResourceKind::Device)?;
        let mut meta = self.meta.write();
        let device = meta.devices.retire(id)?;
        meta.dashboards.remove_by_owner(OwnerKind::Device, id.as_str());
        self.commit(meta, device)
    }

    pub fn device(&self, actor: &Principal, id: &DeviceId) -> Result<Device> {
        self.check(actor, "read_device", Action::ReadPublic, ResourceKind::Device)?;
        self.meta.read().devices.get(id).cloned()
    }

    pub fn devices(&self, actor: &Principal) -> Result<Vec<Device>> {
        self.check(actor, "list_devices", Action::ReadPublic, ResourceKind::Device)?;
        Ok(self.meta.read().devices.devices().cloned().collect())
    }

    pub fn list_known_fields(&self, actor: &Principal, id: &DeviceId) -> Result<Vec<String>> {
        self.check(actor, "list_known_fields", Action::ReadPublic, ResourceKind::Device)?;
        Ok(self.meta.read().devices.list_known_fields(id)?.into_iter().collect())
    }

    // ---- telemetry ----

    /// Ingests a JSON array of wire-format points, validating each against
    /// the device registry.
    pub fn ingest(&self, actor: &Principal, batch: &Value) -> Result<IngestReceipt> {
        self.check(actor, "ingest", Action::WriteDeviceMetadata, ResourceKind::Datapoint)?;
        let meta = self.meta.read();
        self.store.write_wire(batch, &meta.devices)
    }

    /// Raw points with all tags and fields, in time order.
    pub fn query_points(&self, actor: &Principal, selector: &Selector, from: Timestamp, to: Timestamp) -> Result<Vec<DataPoint>> {
        self.check(actor, "query", Action::ReadPublic, ResourceKind::Datapoint)?;
        self.store.query_points(selector, from, to)
    }

    pub fn query(&self, actor: &Principal, q: &Query) -> Result<Series> {
        self.check(actor, "query", Action::ReadPublic, ResourceKind::Datapoint)?;
        self.store.query(q)
    }

    // ---- surveys ----

    pub fn add_template(&self, actor: &Principal, title: &str, provider_url: &str, cadence: Cadence) -> Result<SurveyTemplate> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "add_template", Action::WriteSurveyMetadata, ResourceKind::SurveyTemplate)?;
        let mut meta = self.meta.write();
        let t = meta.surveys.add_template(title.to_owned(), provider_url.to_owned(), cadence)?;
        self.commit(meta, t)
    }

    pub fn templates(&self, actor: &Principal) -> Result<Vec<SurveyTemplate>> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "list_templates", Action::ReadCompliance, ResourceKind::SurveyTemplate)?;
        Ok(self.meta.read().surveys.templates().cloned().collect())
    }

    /// Schedules an assignment and queues its notification.
    pub fn schedule(
        &self,
        actor: &Principal,
        member_id: &MemberId,
        template_id: &TemplateId,
        open_time: Timestamp,
        close_time: Timestamp,
    ) -> Result<(SurveyAssignment, OutboxEntry)> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "schedule", Action::WriteSurveyMetadata, ResourceKind::SurveyAssignment)?;
        let now = self.now();
        let mut meta = self.meta.write();
        let member = meta.registry.get(member_id)?.clone();
        let a = meta.surveys.schedule(&member, template_id, truncate_ms(open_time), truncate_ms(close_time))?;
        let entry = self.queue_delivery(&meta, &member, &a, now)?;
        meta.surveys.mark_delivered(&a.assignment_id);
        let a = meta.surveys.assignment(&a.assignment_id)?.clone();
        self.commit(meta, (a, entry))
    }

    fn queue_delivery(&self, meta: &Meta, member: &Member, a: &SurveyAssignment, now: Timestamp) -> Result<OutboxEntry> {
        let t = meta.surveys.template(&a.template_id)?;
        let entry =
            OutboxEntry { queued_at: now, email: member.email.clone(), link: self.provider.distribution_link(&t.provider_url, &a.anonymous_id) };
        self.outbox.append(entry.clone())?;
        Ok(entry)
    }

    /// Provider callback. The payload goes only to the response store,
    /// keyed by anonymous id.
    pub fn record_completion(&self, actor: &Principal, anonymous_id: &str, payload: Value) -> Result<SurveyAssignment> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "record_completion", Action::WriteSurveyMetadata, ResourceKind::SurveyAssignment)?;
        let received_at = self.now();
        let grace = chrono::Duration::seconds(self.config.surveys.grace_s);
        let mut meta = self.meta.write();
        let a = meta.surveys.complete(anonymous_id, received_at, grace)?;
        let response = AnonymousResponse { anonymous_id: anonymous_id.to_owned(), received_at, payload };
        if let Err(e) = self.responses.append(response) {
            meta.surveys.revert_completion(&a.assignment_id);
            return Err(e);
        }
        self.commit(meta, a)
    }

    pub fn compliance(&self, actor: &Principal, filter: &ComplianceFilter) -> Result<Vec<ComplianceRow>> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "compliance", Action::ReadCompliance, ResourceKind::SurveyAssignment)?;
        let meta = self.meta.read();
        Ok(meta.surveys.compliance(meta.registry.members(), filter))
    }

    pub fn assignments(&self, actor: &Principal) -> Result<Vec<SurveyAssignment>> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "list_assignments", Action::ReadCompliance, ResourceKind::SurveyAssignment)?;
        Ok(self.meta.read().surveys.assignments().cloned().collect())
    }

    pub fn extend_deadline(&self, actor: &Principal, id: &AssignmentId, new_close: Timestamp) -> Result<SurveyAssignment> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "extend_deadline", Action::WriteSurveyMetadata, ResourceKind::SurveyAssignment)?;
        let mut meta = self.meta.write();
        let a = meta.surveys.extend(id, truncate_ms(new_close))?;
        self.commit(meta, a)
    }

    /// Resends an open assignment's link.
    pub fn redistribute(&self, actor: &Principal, id: &AssignmentId) -> Result<(SurveyAssignment, OutboxEntry)> {
        self.config.require(Module::Surveys)?;
        self.check(actor, "redistribute", Action::WriteSurveyMetadata, ResourceKind::SurveyAssignment)?;
        let now = self.now();
        let mut meta = self.meta.write();
        let a = meta.surveys.mark_redelivered(id, now)?;
        let member = meta.registry.get(&a.member_id)?.clone();
        let entry = self.queue_delivery(&meta, &member, &a, now)?;
        self.commit(meta, (a, entry))
    }

    // ---- faults ----

    pub fn faults(&self, actor: &Principal, since: Option<Timestamp>, class: Option<FaultClass>) -> Result<Vec<FaultReport>> {
        self.config.require(Module::Faultwatch)?;
        self.check(actor, "list_faults", Action::ReadPublic, ResourceKind::Device)?;
        Ok(self.meta.read().faults.filter(since, class))
    }

    /// Runs every detector over `window` (default: the configured lookback
    /// ending now) and returns the reports not seen before.
    pub fn sweep(&self, actor: &Principal, window: Option<Window>) -> Result<Vec<FaultReport>> {
        self.config.require(Module::Faultwatch)?;
        self.check(actor, "sweep", Action::WriteDeviceMetadata, ResourceKind::Device)?;
        self.run_sweep(window)
    }

    /// Sweep entry point for the background job.
    pub fn run_sweep(&self, window: Option<Window>) -> Result<Vec<FaultReport>> {
        self.config.require(Module::Faultwatch)?;
        let window = match window {
            Some(w) => w,
            None => {
                let now = self.now();
                Window::new(now - chrono::Duration::seconds(self.config.sweep_lookback_s.max(1)), now)?
            }
        };
        let reports = {
            let meta = self.meta.read();
            let ctx = SweepContext {
                devices: &meta.devices,
                plans: &meta.plans,
                store: &self.store,
                tz: self.tz,
                thresholds: &self.config.faultwatch,
            };
            faultwatch::sweep(&ctx, window)
        };
        let mut meta = self.meta.write();
        let fresh = meta.faults.record(reports);
        tracing::info!(new_reports = fresh.len(), "sweep finished");
        self.commit(meta, fresh)
    }

    // ---- dashboards ----

    pub fn dashboard(&self, actor: &Principal, kind: OwnerKind, owner_id: &str) -> Result<Dashboard> {
        self.config.require(Module::Dashboards)?;
        let d = self.meta.read().dashboards.by_owner(kind, owner_id).cloned();
        let d = d.ok_or_else(|| Error::not_found("dashboard", format!("{kind}/{owner_id}")))?;
        self.check_dashboard_read(actor, &d)?;
        Ok(d)
    }

    fn check_dashboard_read(&self, actor: &Principal, d: &Dashboard) -> Result<()> {
        let own = d.owner_kind == OwnerKind::Member && actor.member_id().is_some_and(|m| m.as_str() == d.owner_id);
        if own {
            self.check(actor, "read_dashboard", Action::ReadOwnData, ResourceKind::Dashboard)
        } else if d.visibility == Visibility::Public {
            self.check(actor, "read_dashboard", Action::ReadPublic, ResourceKind::Dashboard)
        } else {
            self.check(actor, "read_dashboard", Action::WriteDeviceMetadata, ResourceKind::Dashboard)
        }
    }

    pub fn render_dashboard(&self, actor: &Principal, kind: OwnerKind, owner_id: &str) -> Result<RenderedDashboard> {
        let d = self.dashboard(actor, kind, owner_id)?;
        let meta = self.meta.read();
        Ok(dashboards::render(&d, &self.store, &meta.devices, self.now()))
    }

    /// Panel or visibility edits by the owning member or staff.
    pub fn update_dashboard(
        &self,
        actor: &Principal,
        kind: OwnerKind,
        owner_id: &str,
        panels: Option<Vec<Panel>>,
        visibility: Option<Visibility>,
    ) -> Result<Dashboard> {
        self.config.require(Module::Dashboards)?;
        let own = kind == OwnerKind::Member && actor.member_id().is_some_and(|m| m.as_str() == owner_id);
        if own {
            self.check(actor, "update_dashboard", Action::ReadOwnData, ResourceKind::Dashboard)?;
        } else {
            self.check(actor, "update_dashboard", Action::WriteDeviceMetadata, ResourceKind::Dashboard)?;
        }
        let mut meta = self.meta.write();
        let id = meta
            .dashboards
            .by_owner(kind, owner_id)
            .map(|d| d.dashboard_id.clone())
            .ok_or_else(|| Error::not_found("dashboard", format!("{kind}/{owner_id}")))?;
        let Meta { dashboards, devices, .. } = &mut *meta;
        let d = dashboards.update(&id, panels, visibility, devices)?;
        self.commit(meta, d)
    }

    pub fn dashboard_count(&self) -> usize {
        self.meta.read().dashboards.len()
    }

    // ---- counts for invariants and reports ----

    pub fn counts(&self) -> Counts {
        let meta = self.meta.read();
        Counts {
            members: meta.registry.len(),
            devices: meta.devices.len(),
            active_devices: meta.devices.active().count(),
            floorplans: meta.plans.plan_count(),
            seats: meta.plans.seats().count(),
            templates: meta.surveys.template_count(),
            assignments: meta.surveys.assignments().count(),
            dashboards: meta.dashboards.len(),
            points: self.store.len(),
        }
    }

    /// Every object id that still references `member`, across modules.
    pub fn references_to(&self, member: &MemberId) -> Vec<String> {
        let meta = self.meta.read();
        let mut refs = Vec::new();
        refs.extend(
            meta.dashboards
                .iter()
                .filter(|d| d.owner_kind == OwnerKind::Member && d.owner_id == member.as_str())
                .map(|d| format!("dashboard:{}", d.dashboard_id)),
        );
        refs.extend(meta.plans.seats().filter(|s| &s.member_id == member).map(|s| format!("seat:{}", s.seat_id)));
        refs.extend(meta.surveys.assignments().filter(|a| &a.member_id == member).map(|a| format!("assignment:{}", a.assignment_id)));
        refs
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.config.data_dir.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub members: usize,
    pub devices: usize,
    pub active_devices: usize,
    pub floorplans: usize,
    pub seats: usize,
    pub templates: usize,
    pub assignments: usize,
    pub dashboards: usize,
    pub points: usize,
}

fn load_meta(path: &Path) -> Result<Meta> {
    match std::fs::read(path) {
        Ok(bytes) => {
            let mut meta: Meta = serde_json::from_slice(&bytes)?;
            meta.surveys.reindex();
            Ok(meta)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Meta::default()),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{from_millis, ManualClock};
    use crate::devices::{FieldSpec, ValueKind};

    fn lab() -> (Lab, Principal) {
        let lab = Lab::in_memory(Arc::new(ManualClock::new(from_millis(1_600_000_000_000))));
        let admin = lab
            .create_first_admin(NewMember {
                username: "root".into(),
                email: "root@example.org".into(),
                display_name: "Root".into(),
                role: Role::Admin,
                descriptor: Descriptor::Researcher,
                password: Some("pw".into()),
            })
            .unwrap();
        (lab, admin.principal())
    }

    fn new_member(name: &str, role: Role) -> NewMember {
        NewMember {
            username: name.into(),
            email: format!("{name}@example.org"),
            display_name: name.into(),
            role,
            descriptor: Descriptor::Participant,
            password: Some("secret".into()),
        }
    }

    #[test]
    fn staff_cannot_create_members() {
        let (lab, admin) = lab();
        let staff = lab.create_member(&admin, new_member("org", Role::Staff)).unwrap().principal();
        let err = lab.create_member(&staff, new_member("x", Role::User)).unwrap_err();
        assert_eq!(err.code(), "PermissionDenied");
        assert_eq!(lab.create_member(&admin, new_member("org", Role::User)).unwrap_err().code(), "DuplicateUsername");
    }

    #[test]
    fn login_and_token_degrade() {
        let (lab, admin) = lab();
        lab.create_member(&admin, new_member("occupant7", Role::User)).unwrap();
        let (token, m) = lab.login("occupant7", "secret").unwrap();
        assert_eq!(lab.authenticate(Some(&token)), m.principal());
        assert_eq!(lab.authenticate(Some("nope")), Principal::Anonymous);
        assert!(lab.login("occupant7", "wrong").is_err());
    }

    #[test]
    fn rotation_is_self_only() {
        let (lab, admin) = lab();
        let a = lab.create_member(&admin, new_member("a", Role::User)).unwrap();
        let b = lab.create_member(&admin, new_member("b", Role::User)).unwrap();
        assert!(lab.rotate_secret(&b.principal(), &a.member_id).is_err());
        assert!(lab.rotate_secret(&admin, &a.member_id).is_err());
        lab.rotate_secret(&a.principal(), &a.member_id).unwrap();
    }

    #[test]
    fn device_lifecycle_keeps_dashboard_count() {
        let (lab, admin) = lab();
        let plan = lab.create_floorplan(&admin, "Link Lab", 1.0, 10, 10).unwrap();
        let spec = DeviceSpec::new("503eaa71b92a", vec![FieldSpec::new("heartbeat", ValueKind::Integer)])
            .placed(plan.plan_id.clone(), GridCell::new(5, 0));
        let d = lab.register_device(&admin, spec).unwrap();
        assert_eq!(d.location_specific, "grid_5");
        let c = lab.counts();
        assert_eq!(c.dashboards, c.members + c.active_devices);
        lab.retire_device(&admin, &d.device_id).unwrap();
        let c = lab.counts();
        assert_eq!(c.dashboards, c.members + c.active_devices);
    }

    #[test]
    fn every_call_is_audited_once() {
        let (lab, admin) = lab();
        let before = lab.audit_log().len();
        lab.create_floorplan(&admin, "A", 1.0, 2, 2).unwrap();
        let _ = lab.create_floorplan(&Principal::Anonymous, "B", 1.0, 2, 2);
        let log = lab.audit_log();
        assert_eq!(log.len(), before + 2);
        assert_eq!(log.last().unwrap().decision, Decision::Deny);
    }

    #[test]
    fn metadata_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let config = ServiceConfig { data_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() };
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(from_millis(0)));
        let id = {
            let lab = Lab::with_clock(config.clone(), clock.clone()).unwrap();
            let admin = lab.create_first_admin(new_member("root", Role::Admin)).unwrap();
            lab.create_floorplan(&admin.principal(), "Link Lab", 1.0, 3, 3).unwrap();
            admin.member_id
        };
        let lab = Lab::with_clock(config, clock).unwrap();
        assert_eq!(lab.counts().floorplans, 1);
        let (_, m) = lab.login("root", "secret").unwrap();
        assert_eq!(m.member_id, id);
    }
}
