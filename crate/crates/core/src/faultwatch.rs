//! Automated sensor-fault detectors and the periodic sweep that runs them.
//!
//! Detectors are pure functions of their input series. Thresholds come from
//! [`Thresholds`], which deserializes from the `faultwatch` config table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::{Datelike, NaiveDate, TimeZone, Timelike};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{format_ms, serde_ms, Timestamp};
use crate::devices::{Device, DeviceRegistry};
use crate::error::{Error, Result};
use crate::floorplan::{FloorPlan, Floorplans, GridCell};
use crate::ids::{DeviceId, ReportId};
use crate::tsstore::{bucket, Aggregate, DataPoint, Sample, Selector, TsStore, TAG_DEVICE_ID};

/// Scale factor turning a MAD into a standard-deviation estimate under
/// normality.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    Silent,
    PartialLoss,
    NightCutoff,
    OutOfRange,
    ConsensusOutlier,
}

impl FaultClass {
    pub const ALL: [FaultClass; 5] =
        [FaultClass::Silent, FaultClass::PartialLoss, FaultClass::NightCutoff, FaultClass::OutOfRange, FaultClass::ConsensusOutlier];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultClass::Silent => "silent",
            FaultClass::PartialLoss => "partial_loss",
            FaultClass::NightCutoff => "night_cutoff",
            FaultClass::OutOfRange => "out_of_range",
            FaultClass::ConsensusOutlier => "consensus_outlier",
        }
    }
}

impl fmt::Display for FaultClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FaultClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaultClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fault class {s:?}")))
    }
}

/// Half-open time window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    #[serde(with = "serde_ms")]
    pub start: Timestamp,
    #[serde(with = "serde_ms")]
    pub end: Timestamp,
}

impl Window {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidRange(format!("window start {} is not before end {}", format_ms(&start), format_ms(&end))));
        }
        Ok(Window { start, end })
    }

    pub fn length_s(&self) -> f64 {
        (self.end - self.start).num_milliseconds() as f64 / 1000.0
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub report_id: ReportId,
    pub device_id: DeviceId,
    pub fieldname: String,
    pub fault_class: FaultClass,
    #[serde(with = "serde_ms")]
    pub window_start: Timestamp,
    #[serde(with = "serde_ms")]
    pub window_end: Timestamp,
    pub severity: f64,
    pub evidence: BTreeMap<String, f64>,
}

impl FaultReport {
    fn new(device_id: &DeviceId, fieldname: &str, class: FaultClass, window: Window, severity: f64, evidence: BTreeMap<String, f64>) -> Self {
        let digest = Sha256::new()
            .chain_update(device_id.as_str())
            .chain_update([0])
            .chain_update(fieldname)
            .chain_update([0])
            .chain_update(class.as_str())
            .chain_update([0])
            .chain_update(window.start.timestamp_millis().to_le_bytes())
            .chain_update(window.end.timestamp_millis().to_le_bytes())
            .finalize();
        FaultReport {
            report_id: ReportId(hex::encode(&digest[..16])),
            device_id: device_id.clone(),
            fieldname: fieldname.to_owned(),
            fault_class: class,
            window_start: window.start,
            window_end: window.end,
            severity: severity.clamp(0.0, 1.0),
            evidence,
        }
    }

    /// The identity sweeps deduplicate on.
    pub fn key(&self) -> (DeviceId, String, FaultClass, i64, i64) {
        (
            self.device_id.clone(),
            self.fieldname.clone(),
            self.fault_class,
            self.window_start.timestamp_millis(),
            self.window_end.timestamp_millis(),
        )
    }
}

fn evidence<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Silence must span this many expected intervals.
    pub silent_factor: f64,
    /// Severity reaches 1 at this many silent intervals.
    pub silent_full_severity_intervals: f64,
    pub partial_loss_rate: f64,
    pub counter_modulus: i64,
    /// Per-device modulus overrides.
    pub counter_modulus_overrides: BTreeMap<String, i64>,
    pub night_presence_max: f64,
    pub night_baseline_min: f64,
    pub night_min_block_hours: usize,
    /// Mean presence outside the dark block; separates a nightly cutoff from
    /// a device that is dark all day.
    pub night_active_min: f64,
    pub night_trailing_days: u32,
    pub out_of_range_fraction: f64,
    pub consensus_z: f64,
    pub consensus_bin_fraction: f64,
    pub consensus_radius_cells: f64,
    pub consensus_bin_s: u64,
    pub mad_epsilon: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            silent_factor: 3.0,
            silent_full_severity_intervals: 10.0,
            partial_loss_rate: 0.05,
            counter_modulus: 256,
            counter_modulus_overrides: BTreeMap::new(),
            night_presence_max: 0.1,
            night_baseline_min: 0.8,
            night_min_block_hours: 2,
            night_active_min: 0.5,
            night_trailing_days: 14,
            out_of_range_fraction: 0.01,
            consensus_z: 3.5,
            consensus_bin_fraction: 0.75,
            consensus_radius_cells: 5.0,
            consensus_bin_s: 3600,
            mad_epsilon: 1e-9,
        }
    }
}

impl Thresholds {
    pub fn modulus_for(&self, device: &DeviceId) -> i64 {
        self.counter_modulus_overrides.get(device.as_str()).copied().unwrap_or(self.counter_modulus)
    }
}

/// Reports a device that sent nothing for at least `silent_factor` of its
/// shortest declared interval. `points_in_window` counts points of any field.
pub fn detect_silent(device: &Device, points_in_window: usize, window: Window, th: &Thresholds) -> Result<Option<FaultReport>> {
    let (fieldname, interval) = device
        .known_fields
        .values()
        .filter_map(|f| Some((f.fieldname.as_str(), f.expected_interval_s?)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::NoExpectedInterval)?;
    let gap = window.length_s();
    if points_in_window > 0 || gap < th.silent_factor * interval {
        return Ok(None);
    }
    let severity = (gap / (th.silent_full_severity_intervals * interval)).min(1.0);
    let ev = evidence([("gap_s", gap), ("expected_interval_s", interval), ("missed_intervals", gap / interval)]);
    Ok(Some(FaultReport::new(&device.device_id, fieldname, FaultClass::Silent, window, severity, ev)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossEstimate {
    pub expected: u64,
    pub received: u64,
    pub loss_rate: f64,
}

/// Estimates transit loss from a time-ordered run of wrapping counters.
/// Each consecutive pair contributes `(next - prev) mod modulus`
/// transmissions, with a zero delta (a duplicate) counted as one.
pub fn estimate_loss(counters: &[i64], modulus: i64) -> Result<LossEstimate> {
    if modulus <= 1 {
        return Err(Error::InvalidArgument(format!("counter modulus must exceed 1, got {modulus}")));
    }
    if counters.len() < 2 {
        return Err(Error::TooFewPoints);
    }
    let expected: u64 = counters
        .windows(2)
        .map(|w| match (w[1].rem_euclid(modulus) - w[0].rem_euclid(modulus)).rem_euclid(modulus) {
            0 => 1,
            d => d as u64,
        })
        .sum();
    let received = (counters.len() - 1) as u64;
    Ok(LossEstimate { expected, received, loss_rate: 1.0 - received as f64 / expected as f64 })
}

/// Partial-loss detector over one device field. `points` must be time
/// ordered; points without an integer `counter` field are ignored.
pub fn detect_partial_loss(
    device_id: &DeviceId,
    fieldname: &str,
    points: &[DataPoint],
    window: Window,
    modulus: i64,
    th: &Thresholds,
) -> Result<Option<FaultReport>> {
    let counters: Vec<i64> = points
        .iter()
        .filter(|p| window.contains(p.time))
        .filter_map(|p| p.field("counter").and_then(|v| v.as_i64()))
        .collect();
    if counters.is_empty() {
        return Err(Error::NoCounterField);
    }
    let est = estimate_loss(&counters, modulus)?;
    if est.loss_rate <= th.partial_loss_rate {
        return Ok(None);
    }
    let ev = evidence([("expected", est.expected as f64), ("received", est.received as f64), ("loss_rate", est.loss_rate)]);
    Ok(Some(FaultReport::new(device_id, fieldname, FaultClass::PartialLoss, window, est.loss_rate, ev)))
}

/// Fraction of local-hour slots (one slot per local date and hour) in
/// `window` that hold at least one timestamp, indexed by local hour.
pub fn hourly_presence(times: &[Timestamp], window: Window, tz: Tz) -> [f64; 24] {
    let slot = |t: Timestamp| {
        let local = tz.from_utc_datetime(&t.naive_utc());
        (local.date_naive(), local.hour() as usize)
    };
    let mut slots: BTreeSet<(NaiveDate, usize)> = BTreeSet::new();
    let mut t = window.start;
    while t < window.end {
        slots.insert(slot(t));
        t += chrono::Duration::hours(1);
    }
    let hit: BTreeSet<(NaiveDate, usize)> = times.iter().filter(|t| window.contains(**t)).map(|t| slot(*t)).collect();
    let mut expected = [0u32; 24];
    let mut present = [0u32; 24];
    for s in &slots {
        expected[s.1] += 1;
        if hit.contains(s) {
            present[s.1] += 1;
        }
    }
    let mut out = [0.0; 24];
    for h in 0..24 {
        if expected[h] > 0 {
            out[h] = f64::from(present[h]) / f64::from(expected[h]);
        }
    }
    out
}

/// Detects a recurring local-time block in which a device goes dark while
/// the rest of the fleet keeps reporting.
///
/// `history_start` is the earliest data available for the device or fleet;
/// the trailing window must be fully covered by history.
#[allow(clippy::too_many_arguments)]
pub fn detect_night_cutoff(
    device_id: &DeviceId,
    fieldname: &str,
    device_times: &[Timestamp],
    fleet: &[&[Timestamp]],
    window_end: Timestamp,
    trailing_days: u32,
    history_start: Option<Timestamp>,
    tz: Tz,
    th: &Thresholds,
) -> Result<Option<FaultReport>> {
    let window = night_window(window_end, trailing_days, history_start)?;
    let own = hourly_presence(device_times, window, tz);
    let fleet: Vec<[f64; 24]> = fleet.iter().map(|t| hourly_presence(t, window, tz)).collect();
    Ok(night_cutoff_from_presence(device_id, fieldname, &own, &fleet, window, th))
}

/// The trailing window a night-cutoff check looks at, after the history
/// preconditions.
pub fn night_window(window_end: Timestamp, trailing_days: u32, history_start: Option<Timestamp>) -> Result<Window> {
    if trailing_days < 7 {
        return Err(Error::InsufficientHistory(format!("trailing window of {trailing_days} days is below 7")));
    }
    let start = window_end - chrono::Duration::days(i64::from(trailing_days));
    match history_start {
        Some(h) if h <= start => Window::new(start, window_end),
        _ => Err(Error::InsufficientHistory(format!("history does not reach back {trailing_days} days"))),
    }
}

/// Night-cutoff decision from precomputed hourly presence ratios.
pub fn night_cutoff_from_presence(
    device_id: &DeviceId,
    fieldname: &str,
    own: &[f64; 24],
    fleet: &[[f64; 24]],
    window: Window,
    th: &Thresholds,
) -> Option<FaultReport> {
    let mut baseline = [0.0; 24];
    if !fleet.is_empty() {
        for p in fleet {
            for h in 0..24 {
                baseline[h] += p[h];
            }
        }
        for b in &mut baseline {
            *b /= fleet.len() as f64;
        }
    }
    let dark: Vec<bool> = (0..24).map(|h| own[h] < th.night_presence_max && baseline[h] > th.night_baseline_min).collect();
    let (block_start, block_len) = longest_circular_run(&dark)?;
    if block_len < th.night_min_block_hours || block_len >= 24 {
        return None;
    }
    let in_block = |h: usize| (h + 24 - block_start) % 24 < block_len;
    let mean = |vals: &[f64; 24], inside: bool| {
        let sel: Vec<f64> = (0..24).filter(|h| in_block(*h) == inside).map(|h| vals[h]).collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let device_in = mean(own, true);
    let baseline_in = mean(&baseline, true);
    let device_out = mean(own, false);
    if device_out < th.night_active_min {
        return None;
    }
    let ev = evidence([
        ("block_start_hour", block_start as f64),
        ("block_end_hour", ((block_start + block_len) % 24) as f64),
        ("block_hours", block_len as f64),
        ("device_presence", device_in),
        ("baseline_presence", baseline_in),
        ("presence_outside_block", device_out),
    ]);
    Some(FaultReport::new(device_id, fieldname, FaultClass::NightCutoff, window, baseline_in - device_in, ev))
}

/// Longest run of `true` on a ring, as `(start, length)`.
fn longest_circular_run(flags: &[bool]) -> Option<(usize, usize)> {
    let n = flags.len();
    if flags.iter().all(|f| *f) {
        return Some((0, n));
    }
    let mut best: Option<(usize, usize)> = None;
    for start in 0..n {
        if !flags[start] || flags[(start + n - 1) % n] {
            continue;
        }
        let len = (0..n).take_while(|k| flags[(start + k) % n]).count();
        if best.is_none_or(|b| len > b.1) {
            best = Some((start, len));
        }
    }
    best
}

/// Reports a field whose values fall outside its datasheet range more often
/// than `out_of_range_fraction`.
pub fn detect_out_of_range(device: &Device, fieldname: &str, values: &[f64], window: Window, th: &Thresholds) -> Result<Option<FaultReport>> {
    let spec = device.field(fieldname).ok_or_else(|| Error::not_found("field", fieldname))?;
    let (lo, hi) = spec.range().ok_or(Error::NoRangeSpec)?;
    if values.is_empty() {
        return Ok(None);
    }
    let outside = values.iter().filter(|v| !(lo..=hi).contains(*v)).count();
    let fraction = outside as f64 / values.len() as f64;
    if fraction <= th.out_of_range_fraction {
        return Ok(None);
    }
    let ev = evidence([("outside", outside as f64), ("total", values.len() as f64), ("fraction", fraction)]);
    Ok(Some(FaultReport::new(&device.device_id, fieldname, FaultClass::OutOfRange, window, fraction, ev)))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> Option<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

pub fn robust_z(x: f64, neighbors: &[f64], epsilon: f64) -> Option<f64> {
    let m = median(neighbors)?;
    let spread = mad(neighbors)?;
    Some((x - m).abs() / (MAD_SCALE * spread + epsilon))
}

/// One device's contribution to a consensus check.
#[derive(Debug, Clone)]
pub struct PlacedSeries {
    pub device_id: DeviceId,
    pub cell: GridCell,
    pub samples: Vec<Sample>,
}

/// Flags devices that disagree with their spatial neighbors. Each device is
/// compared, bin by bin, against the robust center and spread of the other
/// devices within `consensus_radius_cells`; bins with fewer than two
/// reporting neighbors are skipped.
pub fn detect_consensus_outlier(
    _plan: &FloorPlan,
    fieldname: &str,
    devices: &[PlacedSeries],
    window: Window,
    th: &Thresholds,
) -> Result<Vec<FaultReport>> {
    if devices.len() < 3 {
        return Err(Error::TooFewNeighbors);
    }
    let width_ms = (th.consensus_bin_s.max(1) * 1000) as i64;
    let binned: Vec<HashMap<i64, f64>> = devices
        .iter()
        .map(|d| {
            let inside: Vec<Sample> = d.samples.iter().filter(|s| window.contains(s.time)).copied().collect();
            bucket(&inside, width_ms, Aggregate::Mean).into_iter().map(|s| (s.time.timestamp_millis(), s.value)).collect()
        })
        .collect();
    let cell_distance = |a: GridCell, b: GridCell| {
        (f64::from(a.col) - f64::from(b.col)).hypot(f64::from(a.row) - f64::from(b.row))
    };
    let mut reports = Vec::new();
    for (i, dev) in devices.iter().enumerate() {
        let neighbors: Vec<usize> = (0..devices.len())
            .filter(|&j| j != i && cell_distance(dev.cell, devices[j].cell) <= th.consensus_radius_cells)
            .collect();
        let mut bins: Vec<i64> = binned[i].keys().copied().collect();
        bins.sort_unstable();
        let mut evaluated = 0usize;
        let mut flagged = 0usize;
        let mut zs = Vec::new();
        for b in bins {
            let peer_values: Vec<f64> = neighbors.iter().filter_map(|&j| binned[j].get(&b).copied()).collect();
            if peer_values.len() < 2 {
                continue;
            }
            let z = robust_z(binned[i][&b], &peer_values, th.mad_epsilon).expect("non-empty neighbors");
            evaluated += 1;
            if z > th.consensus_z {
                flagged += 1;
            }
            zs.push(z);
        }
        if evaluated == 0 {
            continue;
        }
        let fraction = flagged as f64 / evaluated as f64;
        if fraction >= th.consensus_bin_fraction {
            let ev = evidence([
                ("bins_evaluated", evaluated as f64),
                ("bins_flagged", flagged as f64),
                ("flagged_fraction", fraction),
                ("robust_z", median(&zs).unwrap_or(0.0)),
                ("neighbors", neighbors.len() as f64),
            ]);
            reports.push(FaultReport::new(&dev.device_id, fieldname, FaultClass::ConsensusOutlier, window, fraction, ev));
        }
    }
    Ok(reports)
}

/// Everything a sweep reads.
pub struct SweepContext<'a> {
    pub devices: &'a DeviceRegistry,
    pub plans: &'a Floorplans,
    pub store: &'a TsStore,
    pub tz: Tz,
    pub thresholds: &'a Thresholds,
}

/// Runs every detector over every active device for `window` and returns
/// the union of their reports, sorted. Detector errors are logged and
/// skipped.
pub fn sweep(ctx: &SweepContext<'_>, window: Window) -> Vec<FaultReport> {
    let th = ctx.thresholds;
    let active: Vec<&Device> = ctx.devices.active().collect();
    let mut by_device: HashMap<&DeviceId, BTreeMap<String, Vec<DataPoint>>> = HashMap::new();
    for d in &active {
        let points = ctx
            .store
            .query_points(&Selector::new().tag(TAG_DEVICE_ID, d.device_id.as_str()), window.start, window.end)
            .unwrap_or_default();
        let grouped = by_device.entry(&d.device_id).or_default();
        for p in points {
            grouped.entry(p.tags.fieldname().to_owned()).or_default().push(p);
        }
    }
    let earliest = by_device.values().flat_map(|m| m.values()).filter_map(|ps| ps.first().map(|p| p.time)).min();
    let span_days = ((window.end - window.start).num_days()).max(0) as u32;
    let trailing = th.night_trailing_days.min(span_days);

    let mut reports = Vec::new();
    let log_skip = |device: &DeviceId, detector: &str, e: Error| {
        tracing::debug!(device = %device, detector, error = %e, "detector skipped");
    };
    for d in &active {
        let fields = &by_device[&d.device_id];
        let last_seen = fields.values().filter_map(|ps| ps.last().map(|p| p.time)).max();
        let silent_start = last_seen.map_or(window.start, |t| t + chrono::Duration::milliseconds(1));
        if let Ok(w) = Window::new(silent_start, window.end) {
            match detect_silent(d, 0, w, th) {
                Ok(r) => reports.extend(r),
                Err(e) => log_skip(&d.device_id, "silent", e),
            }
        }
        for (fieldname, points) in fields {
            if points.iter().any(|p| p.field("counter").is_some()) {
                match detect_partial_loss(&d.device_id, fieldname, points, window, th.modulus_for(&d.device_id), th) {
                    Ok(r) => reports.extend(r),
                    Err(e) => log_skip(&d.device_id, "partial_loss", e),
                }
            }
            if d.field(fieldname).is_some_and(|f| f.range().is_some()) {
                let values: Vec<f64> = points.iter().map(DataPoint::value).collect();
                match detect_out_of_range(d, fieldname, &values, window, th) {
                    Ok(r) => reports.extend(r),
                    Err(e) => log_skip(&d.device_id, "out_of_range", e),
                }
            }
        }
    }

    match night_window(window.end, trailing, earliest) {
        Ok(nw) => {
            let mut presence: BTreeMap<(&DeviceId, &str), [f64; 24]> = BTreeMap::new();
            for d in &active {
                for fieldname in d.known_fields.keys() {
                    let times: Vec<Timestamp> =
                        by_device[&d.device_id].get(fieldname).map(|ps| ps.iter().map(|p| p.time).collect()).unwrap_or_default();
                    presence.insert((&d.device_id, fieldname.as_str()), hourly_presence(&times, nw, ctx.tz));
                }
            }
            for ((device_id, fieldname), own) in &presence {
                let fleet: Vec<[f64; 24]> =
                    presence.iter().filter(|((o, f), _)| o != device_id && f == fieldname).map(|(_, p)| *p).collect();
                if fleet.is_empty() {
                    continue;
                }
                reports.extend(night_cutoff_from_presence(device_id, fieldname, own, &fleet, nw, th));
            }
        }
        Err(e) => tracing::debug!(error = %e, "night cutoff skipped"),
    }

    for plan in ctx.plans.plans() {
        let mut per_field: BTreeMap<&str, Vec<PlacedSeries>> = BTreeMap::new();
        for d in active.iter().filter(|d| d.plan_id.as_ref() == Some(&plan.plan_id)) {
            let Some(cell) = d.cell else { continue };
            for fieldname in d.known_fields.keys() {
                let samples = by_device[&d.device_id]
                    .get(fieldname)
                    .map(|ps| ps.iter().map(|p| Sample::new(p.time, p.value())).collect())
                    .unwrap_or_default();
                per_field.entry(fieldname).or_default().push(PlacedSeries { device_id: d.device_id.clone(), cell, samples });
            }
        }
        for (fieldname, inputs) in per_field {
            match detect_consensus_outlier(plan, fieldname, &inputs, window, th) {
                Ok(r) => reports.extend(r),
                Err(e) => tracing::debug!(plan = %plan.plan_id, fieldname, error = %e, "consensus skipped"),
            }
        }
    }
    reports.sort_by_key(FaultReport::key);
    reports.dedup_by_key(|r| r.key());
    reports
}

/// Persisted reports, deduplicated by device, field, class and window.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct FaultLog {
    reports: Vec<FaultReport>,
}

impl FaultLog {
    /// Stores reports not seen before and returns them.
    pub fn record(&mut self, reports: Vec<FaultReport>) -> Vec<FaultReport> {
        let known: BTreeSet<_> = self.reports.iter().map(FaultReport::key).collect();
        let fresh: Vec<FaultReport> = reports.into_iter().filter(|r| !known.contains(&r.key())).collect();
        self.reports.extend(fresh.iter().cloned());
        fresh
    }

    pub fn reports(&self) -> &[FaultReport] {
        &self.reports
    }

    /// Reports whose window ends at or after `since`, optionally of one class.
    pub fn filter(&self, since: Option<Timestamp>, class: Option<FaultClass>) -> Vec<FaultReport> {
        self.reports
            .iter()
            .filter(|r| since.is_none_or(|s| r.window_end >= s))
            .filter(|r| class.is_none_or(|c| r.fault_class == c))
            .cloned()
            .collect()
    }
}

/// Day index helper for evidence and simulator bookkeeping.
pub fn local_hour(t: Timestamp, tz: Tz) -> u32 {
    tz.from_utc_datetime(&t.naive_utc()).hour()
}

pub fn local_weekday(t: Timestamp, tz: Tz) -> u32 {
    tz.from_utc_datetime(&t.naive_utc()).weekday().num_days_from_monday()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::from_millis;
    use crate::devices::{DeviceSpec, FieldSpec, ValueKind, DEFAULT_SYSTEM_VERSION};
    use crate::tsstore::{FieldValue, TagSet};

    fn lux_device(id: &str) -> Device {
        let mut reg = DeviceRegistry::default();
        let spec = DeviceSpec::new(
            id,
            vec![FieldSpec::new("lux", ValueKind::Real).with_range(0.0, 100_000.0).with_interval(900.0)],
        );
        reg.register(spec, None, DEFAULT_SYSTEM_VERSION).unwrap()
    }

    fn h(hours: i64) -> Timestamp {
        from_millis(hours * 3_600_000)
    }

    #[test]
    fn silent_thresholds() {
        let d = lux_device("a1");
        let th = Thresholds::default();
        let r = detect_silent(&d, 0, Window::new(h(0), h(2)).unwrap(), &th).unwrap().unwrap();
        assert!((r.severity - 0.8).abs() < 1e-12);
        let short = Window::new(h(0), h(0) + chrono::Duration::minutes(30)).unwrap();
        assert!(detect_silent(&d, 0, short, &th).unwrap().is_none());
        assert!(detect_silent(&d, 8, Window::new(h(0), h(2)).unwrap(), &th).unwrap().is_none());
        let mut no_iv = d.clone();
        no_iv.known_fields.get_mut("lux").unwrap().expected_interval_s = None;
        assert!(matches!(detect_silent(&no_iv, 0, Window::new(h(0), h(2)).unwrap(), &th), Err(Error::NoExpectedInterval)));
    }

    #[test]
    fn loss_by_hand() {
        let e = estimate_loss(&[10, 11, 13, 14], 256).unwrap();
        assert_eq!((e.expected, e.received), (4, 3));
        assert!((e.loss_rate - 0.25).abs() < 1e-12);
        let w = estimate_loss(&[254, 255, 0, 1], 256).unwrap();
        assert_eq!((w.expected, w.received, w.loss_rate), (3, 3, 0.0));
        assert_eq!(estimate_loss(&[5, 6, 7, 8, 9], 256).unwrap().loss_rate, 0.0);
        assert!(matches!(estimate_loss(&[1], 256), Err(Error::TooFewPoints)));
        let dup = estimate_loss(&[3, 3, 4], 256).unwrap();
        assert_eq!((dup.expected, dup.received), (2, 2));
    }

    #[test]
    fn partial_loss_needs_counters() {
        let id = DeviceId::from("a1");
        let tags = TagSet::new("a1", "L", "grid_0", "lux", "v");
        let plain: Vec<DataPoint> = (0..3).map(|i| DataPoint::new(h(i), tags.clone(), FieldValue::Real(1.0))).collect();
        let w = Window::new(h(0), h(10)).unwrap();
        let th = Thresholds::default();
        assert!(matches!(detect_partial_loss(&id, "lux", &plain, w, 256, &th), Err(Error::NoCounterField)));
        let counted: Vec<DataPoint> = [10, 11, 13, 14]
            .iter()
            .enumerate()
            .map(|(i, c)| DataPoint::new(h(i as i64), tags.clone(), FieldValue::Real(1.0)).with_field("counter", FieldValue::Integer(*c)))
            .collect();
        let r = detect_partial_loss(&id, "lux", &counted, w, 256, &th).unwrap().unwrap();
        assert_eq!(r.evidence["expected"], 4.0);
        assert_eq!(r.evidence["received"], 3.0);
    }

    #[test]
    fn out_of_range_fraction() {
        let d = lux_device("a1");
        let th = Thresholds::default();
        let w = Window::new(h(0), h(1)).unwrap();
        let mut vals = vec![500.0; 1000];
        vals[0] = -5.0;
        assert!(detect_out_of_range(&d, "lux", &vals, w, &th).unwrap().is_none());
        let mut vals = vec![500.0; 1000];
        for v in vals.iter_mut().take(50) {
            *v = 200_000.0;
        }
        let r = detect_out_of_range(&d, "lux", &vals, w, &th).unwrap().unwrap();
        assert!((r.severity - 0.05).abs() < 1e-12);
        let mut bare = d.clone();
        bare.known_fields.get_mut("lux").unwrap().max_valid = None;
        assert!(matches!(detect_out_of_range(&bare, "lux", &vals, w, &th), Err(Error::NoRangeSpec)));
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(mad(&[1.0, 1.0, 2.0, 2.0, 4.0, 6.0, 9.0]), Some(1.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn circular_runs() {
        let mut f = [false; 24];
        for h in [22, 23, 0, 1, 2, 3, 4, 5] {
            f[h] = true;
        }
        f[12] = true;
        assert_eq!(longest_circular_run(&f), Some((22, 8)));
        assert_eq!(longest_circular_run(&[false; 24]), None);
        assert_eq!(longest_circular_run(&[true; 24]), Some((0, 24)));
    }

    #[test]
    fn consensus_needs_three() {
        let plan = FloorPlan::new("p", 1.0, 4, 4).unwrap();
        let two: Vec<PlacedSeries> = (0..2)
            .map(|i| PlacedSeries { device_id: DeviceId::from(format!("d{i}")), cell: GridCell::new(i, 0), samples: vec![] })
            .collect();
        let w = Window::new(h(0), h(1)).unwrap();
        assert!(matches!(detect_consensus_outlier(&plan, "lux", &two, w, &Thresholds::default()), Err(Error::TooFewNeighbors)));
    }

    #[test]
    fn fault_log_dedups() {
        let d = lux_device("a1");
        let r = detect_silent(&d, 0, Window::new(h(0), h(2)).unwrap(), &Thresholds::default()).unwrap().unwrap();
        let mut log = FaultLog::default();
        assert_eq!(log.record(vec![r.clone()]).len(), 1);
        assert!(log.record(vec![r]).is_empty());
        assert_eq!(log.filter(Some(h(3)), None).len(), 0);
        assert_eq!(log.filter(Some(h(2)), Some(FaultClass::Silent)).len(), 1);
    }
}
