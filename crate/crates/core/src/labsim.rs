//! Deterministic sensor-fleet simulator.
//!
//! Randomness comes from ChaCha8 seeded with the scenario seed. Each device
//! draws its signal from stream `index + 1` and its fault decisions from
//! stream `2^32 + index`; weather shared by the fleet comes from stream 0.
//! Injecting a fault into one device therefore never changes another
//! device's points.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{Datelike, TimeZone, Timelike};
use chrono_tz::Tz;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::clock::{format_ms, from_millis, parse_rfc3339, serde_ms, ManualClock, Timestamp};
use crate::config::ServiceConfig;
use crate::devices::{DeviceSpec, FieldSpec, ValueKind, DEFAULT_SYSTEM_VERSION};
use crate::error::{Error, Result};
use crate::faultwatch::{FaultClass, FaultReport, Window};
use crate::floorplan::{FloorPlan, GridCell};
use crate::ids::PlanId;
use crate::platform::Lab;
use crate::registry::{Descriptor, NewMember, Role};
use crate::tsstore::{DataPoint, FieldValue, TagSet};

pub const COUNTER_MODULUS: i64 = 256;
const BATCH: usize = 2000;

fn default_start() -> Timestamp {
    parse_rfc3339("2021-01-04T00:00:00Z").expect("valid literal")
}

fn default_intervals() -> BTreeMap<String, f64> {
    BTreeMap::from([("lux".to_string(), 900.0)])
}

fn default_tz() -> String {
    "UTC".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSpec {
    pub name: String,
    pub cell_size_m: f64,
    /// Grid size; derived from the device layout when absent.
    pub cols: Option<u32>,
    pub rows: Option<u32>,
    /// Cells between neighboring devices.
    pub spacing: u32,
}

impl Default for PlanSpec {
    fn default() -> Self {
        PlanSpec { name: "Link Lab".into(), cell_size_m: 1.0, cols: None, rows: None, spacing: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// Nothing is transmitted from `at`, or from `after_days` into the run.
    SilentFrom {
        #[serde(default, with = "serde_ms::option", skip_serializing_if = "Option::is_none")]
        at: Option<Timestamp>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        after_days: Option<f64>,
    },
    /// Each transmission is lost in transit with probability `p`.
    PartialDrop { p: f64 },
    /// The device is unpowered during local hours `[start_hour, end_hour)`.
    NightCutoff { start_hour: u32, end_hour: u32 },
    /// Readings are mirrored: `x -> max - x`.
    Invert { max: f64 },
    /// A constant is added to every reading.
    Offset { value: f64 },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::SilentFrom { .. } => "silent_from",
            FaultKind::PartialDrop { .. } => "partial_drop",
            FaultKind::NightCutoff { .. } => "night_cutoff",
            FaultKind::Invert { .. } => "invert",
            FaultKind::Offset { .. } => "offset",
        }
    }

    /// The detector class expected to catch this fault.
    pub fn class(&self) -> FaultClass {
        match self {
            FaultKind::SilentFrom { .. } => FaultClass::Silent,
            FaultKind::PartialDrop { .. } => FaultClass::PartialLoss,
            FaultKind::NightCutoff { .. } => FaultClass::NightCutoff,
            FaultKind::Invert { .. } | FaultKind::Offset { .. } => FaultClass::ConsensusOutlier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub device_index: usize,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub device_count: usize,
    pub duration_days: u32,
    #[serde(default = "default_start", with = "serde_ms")]
    pub start: Timestamp,
    /// Sampling interval per sensor class. Every device carries every class.
    #[serde(default = "default_intervals")]
    pub interval_s: BTreeMap<String, f64>,
    #[serde(default = "default_tz")]
    pub timezone: String,
    #[serde(default)]
    pub plan: PlanSpec,
    #[serde(default)]
    pub faults: Vec<FaultInjection>,
}

/// Sensor classes the generator knows how to synthesize.
pub const CLASSES: [&str; 2] = ["lux", "temperature"];

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidScenario(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    pub fn end(&self) -> Timestamp {
        self.start + chrono::Duration::days(i64::from(self.duration_days))
    }

    pub fn tz(&self) -> Result<Tz> {
        Tz::from_str(&self.timezone).map_err(|_| Error::InvalidScenario(format!("unknown timezone {:?}", self.timezone)))
    }

    fn layout_cols(&self) -> u32 {
        (self.device_count as f64).sqrt().ceil().max(1.0) as u32
    }

    pub fn cell_of(&self, index: usize) -> GridCell {
        let per_row = self.layout_cols() as usize;
        let s = self.plan.spacing.max(1);
        GridCell::new((index % per_row) as u32 * s, (index / per_row) as u32 * s)
    }

    pub fn plan_dims(&self) -> (u32, u32) {
        let per_row = self.layout_cols();
        let rows_used = (self.device_count as u32).div_ceil(per_row);
        let s = self.plan.spacing.max(1);
        (self.plan.cols.unwrap_or(per_row * s), self.plan.rows.unwrap_or(rows_used * s))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.device_count == 0 || self.device_count > 100_000 {
            return bad(format!("device_count must be in 1..=100000, got {}", self.device_count));
        }
        if self.duration_days == 0 {
            return bad("duration_days must be positive".into());
        }
        self.tz()?;
        if self.interval_s.is_empty() {
            return bad("interval_s needs at least one sensor class".into());
        }
        for (class, iv) in &self.interval_s {
            if !CLASSES.contains(&class.as_str()) {
                return bad(format!("unknown sensor class {class:?}"));
            }
            if !(iv.is_finite() && *iv >= 1.0) {
                return bad(format!("interval for {class} must be at least one second"));
            }
        }
        let (cols, rows) = self.plan_dims();
        let plan = FloorPlan::new(&self.plan.name, self.plan.cell_size_m, cols, rows)
            .map_err(|e| Error::InvalidScenario(e.to_string()))?;
        if !plan.contains(self.cell_of(self.device_count - 1)) {
            return bad(format!("a {cols}x{rows} plan cannot hold {} devices", self.device_count));
        }
        for f in &self.faults {
            if f.device_index >= self.device_count {
                return bad(format!("fault device_index {} >= device_count {}", f.device_index, self.device_count));
            }
            match &f.kind {
                FaultKind::SilentFrom { at, after_days } => match (at, after_days) {
                    (Some(_), None) => {}
                    (None, Some(d)) if d.is_finite() && *d >= 0.0 => {}
                    _ => return bad("silent_from needs exactly one of at or after_days".into()),
                },
                FaultKind::PartialDrop { p } if !(0.0..=1.0).contains(p) => return bad(format!("drop probability {p} outside [0,1]")),
                FaultKind::NightCutoff { start_hour, end_hour } if *start_hour > 23 || *end_hour > 23 || start_hour == end_hour => {
                    return bad(format!("night block [{start_hour},{end_hour}) is not a valid hour range"))
                }
                FaultKind::Invert { max } if !max.is_finite() => return bad("invert max must be finite".into()),
                FaultKind::Offset { value } if !value.is_finite() => return bad("offset must be finite".into()),
                _ => {}
            }
        }
        Ok(())
    }

    fn silent_from(&self, kind: &FaultKind) -> Option<Timestamp> {
        match kind {
            FaultKind::SilentFrom { at: Some(t), .. } => Some(*t),
            FaultKind::SilentFrom { after_days: Some(d), .. } => {
                Some(self.start + chrono::Duration::milliseconds((d * 86_400_000.0).round() as i64))
            }
            _ => None,
        }
    }
}

/// Device ids are 12 hex characters derived from the seed and index.
pub fn device_id(seed: u64, index: usize) -> String {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update((index as u64).to_le_bytes()).finalize();
    hex::encode(&digest[..6])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDevice {
    pub index: usize,
    pub device_id: String,
    pub cell: GridCell,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedFault {
    pub device_index: usize,
    pub device_id: String,
    pub kind: String,
    pub class: FaultClass,
}

/// A generated fleet and its time-ordered point stream.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub plan: FloorPlan,
    pub devices: Vec<SimDevice>,
    pub points: Vec<DataPoint>,
    /// Points the clean fleet would have sent.
    pub generated: usize,
    /// Points removed by injected faults.
    pub deleted: usize,
    pub injected: Vec<InjectedFault>,
}

impl Fleet {
    /// SHA-256 over the canonical serialization of every point, one per line.
    pub fn stream_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.points {
            h.update(p.to_canonical_json().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn field_specs(scenario: &Scenario) -> Vec<FieldSpec> {
        scenario
            .interval_s
            .iter()
            .map(|(class, iv)| match class.as_str() {
                "lux" => FieldSpec::new("lux", ValueKind::Real).with_unit("lx").with_range(0.0, 100_000.0).with_interval(*iv),
                _ => FieldSpec::new("temperature", ValueKind::Real).with_unit("C").with_range(-40.0, 85.0).with_interval(*iv),
            })
            .collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Local hour of day as a fraction, and whether the building is occupied.
fn local_context(t: Timestamp, tz: Tz) -> (f64, bool) {
    let local = tz.from_utc_datetime(&t.naive_utc());
    let h = f64::from(local.hour()) + f64::from(local.minute()) / 60.0 + f64::from(local.second()) / 3600.0;
    let weekday = local.weekday().num_days_from_monday() < 5;
    (h, weekday && (8.0..18.0).contains(&h))
}

fn daylight(h: f64) -> f64 {
    if (6.0..18.0).contains(&h) {
        (std::f64::consts::PI * (h - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

fn in_block(h: f64, start: u32, end: u32) -> bool {
    let hour = h.floor() as u32;
    if start < end {
        (start..end).contains(&hour)
    } else {
        hour >= start || hour < end
    }
}

/// Generates the fleet. Pure function of the scenario.
pub fn generate(scenario: &Scenario) -> Result<Fleet> {
    scenario.validate()?;
    let tz = scenario.tz()?;
    let (cols, rows) = scenario.plan_dims();
    let plan = FloorPlan::new(&scenario.plan.name, scenario.plan.cell_size_m, cols, rows)?;
    let start_ms = scenario.start.timestamp_millis();
    let end_ms = scenario.end().timestamp_millis();
    let days = scenario.duration_days as usize;

    let mut weather = stream_rng(scenario.seed, 0);
    let cloud: Vec<f64> = (0..=days).map(|_| weather.random_range(0.6..1.0)).collect();

    let mut devices = Vec::with_capacity(scenario.device_count);
    let mut injected = Vec::new();
    let mut points: Vec<(i64, usize, DataPoint)> = Vec::new();
    let mut generated = 0usize;
    let mut deleted = 0usize;

    for index in 0..scenario.device_count {
        let id = device_id(scenario.seed, index);
        let cell = scenario.cell_of(index);
        let label = plan.label(cell);
        let faults: Vec<&FaultKind> = scenario.faults.iter().filter(|f| f.device_index == index).map(|f| &f.kind).collect();
        for f in &faults {
            injected.push(InjectedFault { device_index: index, device_id: id.clone(), kind: f.name().into(), class: f.class() });
        }
        let silent_from = faults.iter().filter_map(|f| scenario.silent_from(f)).min();

        let mut rng = stream_rng(scenario.seed, index as u64 + 1);
        let mut fault_rng = stream_rng(scenario.seed, (1 << 32) + index as u64);
        let gain = 1.0 + (Normal::new(0.0, 0.03).expect("valid sigma").sample(&mut rng) as f64).clamp(-0.06, 0.06);
        let noise = Normal::new(0.0, 1.0).expect("valid sigma");

        for (class, interval) in &scenario.interval_s {
            let interval_ms = (interval * 1000.0).round() as i64;
            let mut counter: i64 = rng.random_range(0..COUNTER_MODULUS);
            let mut tick = 0i64;
            loop {
                let jitter = rng.random_range(0..3000i64.min(interval_ms / 4).max(1));
                let t_ms = start_ms + tick * interval_ms + jitter;
                tick += 1;
                if t_ms >= end_ms {
                    break;
                }
                let t = from_millis(t_ms);
                let (h, occupied) = local_context(t, tz);
                let z: f64 = noise.sample(&mut rng);
                let drop_draw: f64 = fault_rng.random();
                let day = ((t_ms - start_ms) / 86_400_000) as usize;
                let mut value = match class.as_str() {
                    "lux" => {
                        let ambient = 300.0 * daylight(h) * cloud[day.min(days)] + if occupied { 400.0 } else { 0.0 };
                        (gain * ambient + 5.0 + z * (1.5 + 0.02 * ambient)).max(0.0)
                    }
                    _ => 21.0 + 1.5 * (std::f64::consts::PI * (h - 9.0) / 12.0).sin() + if occupied { 1.0 } else { 0.0 } + 0.2 * z,
                };
                generated += 1;

                let unpowered = faults.iter().any(|f| matches!(f, FaultKind::NightCutoff { start_hour, end_hour } if in_block(h, *start_hour, *end_hour)));
                if unpowered || silent_from.is_some_and(|s| t >= s) {
                    deleted += 1;
                    continue;
                }
                counter = (counter + 1) % COUNTER_MODULUS;
                let lost = faults.iter().any(|f| matches!(f, FaultKind::PartialDrop { p } if drop_draw < *p));
                if lost {
                    deleted += 1;
                    continue;
                }
                for f in &faults {
                    match f {
                        FaultKind::Invert { max } => value = max - value,
                        FaultKind::Offset { value: off } => value += off,
                        _ => {}
                    }
                }
                let value = (value * 100.0).round() / 100.0;
                let tags = TagSet::new(&id, &plan.name, &label, class, DEFAULT_SYSTEM_VERSION);
                let p = DataPoint::new(t, tags, FieldValue::Real(value)).with_field("counter", FieldValue::Integer(counter));
                points.push((t_ms, index, p));
            }
        }
        devices.push(SimDevice { index, device_id: id, cell, label });
    }
    points.sort_by_key(|(t, i, p)| (*t, *i, p.tags.fieldname().to_owned()));
    Ok(Fleet { plan, devices, points: points.into_iter().map(|(_, _, p)| p).collect(), generated, deleted, injected })
}

/// Where `run` sends the fleet.
#[derive(Debug, Clone)]
pub enum Target {
    InProcess,
    Http { base_url: String, token: Option<String> },
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "inproc" {
            Ok(Target::InProcess)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Target::Http { base_url: s.trim_end_matches('/').to_owned(), token: None })
        } else {
            Err(Error::InvalidArgument(format!("target must be inproc or an http(s) URL, got {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassScore {
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedFault {
    pub device_id: String,
    pub fieldname: String,
    pub class: FaultClass,
    pub severity: f64,
    #[serde(with = "serde_ms")]
    pub window_start: Timestamp,
    #[serde(with = "serde_ms")]
    pub window_end: Timestamp,
    pub evidence: BTreeMap<String, f64>,
}

impl From<&FaultReport> for DetectedFault {
    fn from(r: &FaultReport) -> Self {
        DetectedFault {
            device_id: r.device_id.to_string(),
            fieldname: r.fieldname.clone(),
            class: r.fault_class,
            severity: r.severity,
            window_start: r.window_start,
            window_end: r.window_end,
            evidence: r.evidence.clone(),
        }
    }
}

/// Injected versus detected faults. Contains no wall-clock values, so
/// identical inputs give identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub device_count: usize,
    pub duration_days: u32,
    pub generated_points: usize,
    pub deleted_points: usize,
    pub accepted_points: usize,
    pub stream_sha256: String,
    pub injected: Vec<InjectedFault>,
    pub detected: Vec<DetectedFault>,
    pub per_class: BTreeMap<FaultClass, ClassScore>,
    /// Devices without any injected fault that drew at least one report.
    pub false_positive_devices: Vec<String>,
}

impl ScenarioReport {
    /// Fraction of injected faults whose class was reported on their device.
    pub fn recall(&self) -> f64 {
        if self.injected.is_empty() {
            return 1.0;
        }
        let hit = self
            .injected
            .iter()
            .filter(|i| self.detected.iter().any(|d| d.device_id == i.device_id && d.class == i.class))
            .count();
        hit as f64 / self.injected.len() as f64
    }
}

pub fn score(scenario: &Scenario, fleet: &Fleet, accepted: usize, reports: &[FaultReport]) -> ScenarioReport {
    let mut detected: Vec<DetectedFault> = reports.iter().map(DetectedFault::from).collect();
    detected.sort_by(|a, b| (&a.device_id, &a.fieldname, a.class, a.window_start).cmp(&(&b.device_id, &b.fieldname, b.class, b.window_start)));
    let mut per_class = BTreeMap::new();
    for class in FaultClass::ALL {
        let truth: BTreeSet<&str> = fleet.injected.iter().filter(|i| i.class == class).map(|i| i.device_id.as_str()).collect();
        let found: BTreeSet<&str> = detected.iter().filter(|d| d.class == class).map(|d| d.device_id.as_str()).collect();
        per_class.insert(
            class,
            ClassScore {
                tp: truth.intersection(&found).count(),
                fp: found.difference(&truth).count(),
                fn_: truth.difference(&found).count(),
            },
        );
    }
    let faulty: BTreeSet<&str> = fleet.injected.iter().map(|i| i.device_id.as_str()).collect();
    let false_positive_devices: BTreeSet<String> =
        detected.iter().filter(|d| !faulty.contains(d.device_id.as_str())).map(|d| d.device_id.clone()).collect();
    ScenarioReport {
        seed: scenario.seed,
        device_count: scenario.device_count,
        duration_days: scenario.duration_days,
        generated_points: fleet.generated,
        deleted_points: fleet.deleted,
        accepted_points: accepted,
        stream_sha256: fleet.stream_digest(),
        injected: fleet.injected.clone(),
        detected,
        per_class,
        false_positive_devices: false_positive_devices.into_iter().collect(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Wall-clock pacing: simulated seconds per real second. `None` runs as
    /// fast as possible.
    pub speedup: Option<f64>,
}

/// Generates the scenario, drives it into `target`, sweeps, and scores.
pub fn run(scenario: &Scenario, target: &Target, opts: &RunOptions) -> Result<ScenarioReport> {
    scenario.validate()?;
    match target {
        Target::InProcess => run_inproc(scenario, opts),
        Target::Http { base_url, token } => run_http(scenario, base_url, token.as_deref(), opts),
    }
}

fn pace(opts: &RunOptions, began: Instant, sim_start: Timestamp, t: Timestamp) {
    let Some(speed) = opts.speedup.filter(|s| *s > 0.0) else { return };
    let due = Duration::from_secs_f64(((t - sim_start).num_milliseconds().max(0) as f64 / 1000.0) / speed);
    if let Some(wait) = due.checked_sub(began.elapsed()) {
        std::thread::sleep(wait);
    }
}

fn batches(fleet: &Fleet) -> impl Iterator<Item = &[DataPoint]> {
    fleet.points.chunks(BATCH)
}

fn device_specs(scenario: &Scenario, fleet: &Fleet, plan_id: &PlanId) -> Vec<DeviceSpec> {
    fleet
        .devices
        .iter()
        .map(|d| {
            let mut spec = DeviceSpec::new(&d.device_id, Fleet::field_specs(scenario)).placed(plan_id.clone(), d.cell);
            spec.system_version = Some(DEFAULT_SYSTEM_VERSION.into());
            spec
        })
        .collect()
}

fn run_inproc(scenario: &Scenario, opts: &RunOptions) -> Result<ScenarioReport> {
    let fleet = generate(scenario)?;
    let config = ServiceConfig { deployment_tz: scenario.timezone.clone(), ..ServiceConfig::default() };
    let clock = Arc::new(ManualClock::new(scenario.start));
    let lab = Lab::with_clock(config, clock.clone())?;
    let operator = lab
        .create_first_admin(NewMember {
            username: "labsim".into(),
            email: String::new(),
            display_name: "Simulator".into(),
            role: Role::Admin,
            descriptor: Descriptor::Developer,
            password: None,
        })?
        .principal();
    let (cols, rows) = scenario.plan_dims();
    let plan = lab.create_floorplan(&operator, &scenario.plan.name, scenario.plan.cell_size_m, cols, rows)?;
    for spec in device_specs(scenario, &fleet, &plan.plan_id) {
        lab.register_device(&operator, spec)?;
    }
    let began = Instant::now();
    let mut accepted = 0;
    for batch in batches(&fleet) {
        if let Some(last) = batch.last() {
            pace(opts, began, scenario.start, last.time);
            clock.set(last.time);
        }
        let wire = Value::Array(batch.iter().map(|p| serde_json::to_value(p).expect("points serialize")).collect());
        let receipt = lab.ingest(&operator, &wire)?;
        if let Some(r) = receipt.rejected.first() {
            return Err(Error::IngestRejected(format!("point {} rejected: {}", r.index, r.reason)));
        }
        accepted += receipt.accepted;
    }
    clock.set(scenario.end());
    let reports = lab.sweep(&operator, Some(Window::new(scenario.start, scenario.end())?))?;
    Ok(score(scenario, &fleet, accepted, &reports))
}

struct HttpClient {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

impl HttpClient {
    fn new(base: &str, token: Option<&str>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        HttpClient { agent, base: format!("{base}/api/v1"), token: token.map(str::to_owned) }
    }

    fn check(path: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<Value> {
        let status = resp.status();
        let body: Value = resp.body_mut().read_json().unwrap_or(Value::Null);
        if status.is_success() {
            return Ok(body);
        }
        let code = body.get("code").and_then(Value::as_str).unwrap_or("HttpError");
        let message = body.get("message").and_then(Value::as_str).unwrap_or("");
        Err(Error::IngestRejected(format!("{path}: {status} {code} {message}")))
    }

    fn get(&self, path: &str) -> Result<Value> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let resp = req.call().map_err(|e| Error::TargetUnreachable(e.to_string()))?;
        Self::check(path, resp)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let resp = req.send_json(body).map_err(|e| Error::TargetUnreachable(e.to_string()))?;
        Self::check(path, resp)
    }
}

fn run_http(scenario: &Scenario, base_url: &str, token: Option<&str>, opts: &RunOptions) -> Result<ScenarioReport> {
    let client = HttpClient::new(base_url, token);
    client.get("/health").map_err(|e| match e {
        Error::TargetUnreachable(m) => Error::TargetUnreachable(m),
        other => Error::TargetUnreachable(other.to_string()),
    })?;
    if token.is_none() {
        return Err(Error::InvalidArgument("an HTTP target needs a staff token".into()));
    }
    let fleet = generate(scenario)?;
    let (cols, rows) = scenario.plan_dims();
    let plan = client.post(
        "/floorplans",
        &json!({ "name": scenario.plan.name, "cell_size_m": scenario.plan.cell_size_m, "cols": cols, "rows": rows }),
    )?;
    let plan_id = PlanId::from(plan["plan_id"].as_str().unwrap_or_default());
    for spec in device_specs(scenario, &fleet, &plan_id) {
        let body = json!({
            "device_id": spec.device_id,
            "plan_id": plan_id,
            "cell": spec.cell,
            "fields": spec.fields,
            "system_version": spec.system_version,
        });
        client.post("/devices", &body)?;
    }
    let began = Instant::now();
    let mut accepted = 0;
    for batch in batches(&fleet) {
        if let Some(last) = batch.last() {
            pace(opts, began, scenario.start, last.time);
        }
        let wire = Value::Array(batch.iter().map(|p| serde_json::to_value(p).expect("points serialize")).collect());
        let receipt = client.post("/points", &wire)?;
        if let Some(r) = receipt["rejected"].as_array().and_then(|a| a.first()) {
            return Err(Error::IngestRejected(format!("point rejected: {r}")));
        }
        accepted += receipt["accepted"].as_u64().unwrap_or(0) as usize;
    }
    let swept = client.post("/faults/sweep", &json!({ "from": format_ms(&scenario.start), "to": format_ms(&scenario.end()) }))?;
    let reports: Vec<FaultReport> = serde_json::from_value(swept["new_reports"].clone())?;
    let ours: BTreeSet<&str> = fleet.devices.iter().map(|d| d.device_id.as_str()).collect();
    let reports: Vec<FaultReport> = reports.into_iter().filter(|r| ours.contains(r.device_id.as_str())).collect();
    Ok(score(scenario, &fleet, accepted, &reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        "seed = 7\ndevice_count = 4\nduration_days = 2\n".parse().unwrap()
    }

    #[test]
    fn counts_without_faults() {
        let f = generate(&small()).unwrap();
        assert_eq!(f.points.len(), 4 * 2 * 96);
        assert_eq!(f.generated, f.points.len());
        assert_eq!(f.deleted, 0);
    }

    #[test]
    fn deterministic() {
        let s = small();
        assert_eq!(generate(&s).unwrap().stream_digest(), generate(&s).unwrap().stream_digest());
    }

    #[test]
    fn counters_wrap_and_increment() {
        let f = generate(&small()).unwrap();
        let id = &f.devices[0].device_id;
        let c: Vec<i64> = f.points.iter().filter(|p| p.tags.device_id() == id).map(|p| p.field("counter").unwrap().as_i64().unwrap()).collect();
        assert!(c.windows(2).all(|w| (w[1] - w[0]).rem_euclid(COUNTER_MODULUS) == 1));
    }

    #[test]
    fn rejects_bad_scenarios() {
        assert!("seed = 1\ndevice_count = 0\nduration_days = 1\n".parse::<Scenario>().is_err());
        let s = "seed = 1\ndevice_count = 2\nduration_days = 1\n[[faults]]\ndevice_index = 5\nkind = \"partial_drop\"\np = 0.1\n";
        assert!(matches!(s.parse::<Scenario>(), Err(Error::InvalidScenario(_))));
        assert!("seed = 1\ndevice_count = 2\nduration_days = 1\ntimezone = \"Nowhere\"\n".parse::<Scenario>().is_err());
    }

    #[test]
    fn golden_stream_digest() {
        let s = Scenario::load(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/seed42.toml")).unwrap();
        assert_eq!(generate(&s).unwrap().stream_digest(), "85c30be9968fd2c60087e73e424e2d436f6372f0ecec2b617ab5d2c06221054d");
    }

    #[test]
    fn faults_stay_on_their_device() {
        let mut s = small();
        let clean = generate(&s).unwrap();
        s.faults.push(FaultInjection { device_index: 1, kind: FaultKind::PartialDrop { p: 0.5 } });
        let faulty = generate(&s).unwrap();
        let of = |f: &Fleet, i: usize| -> Vec<String> {
            let id = &f.devices[i].device_id;
            f.points.iter().filter(|p| p.tags.device_id() == id).map(DataPoint::to_canonical_json).collect()
        };
        for i in [0, 2, 3] {
            assert_eq!(of(&clean, i), of(&faulty, i));
        }
        assert!(of(&faulty, 1).len() < of(&clean, 1).len());
    }

    #[test]
    fn night_block_wraps() {
        assert!(in_block(23.5, 22, 6));
        assert!(in_block(0.0, 22, 6));
        assert!(!in_block(6.0, 22, 6));
        assert!(in_block(13.2, 12, 14));
    }
}
