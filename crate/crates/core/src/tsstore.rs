//! Embedded append-only time-series store using the tag/field data model.
//!
//! Tags are time-invariant strings and are the only query predicates. Fields
//! are the dynamic numeric or boolean values, and every point carries a
//! `value` field. On disk the store is a set of per-day segment files under
//! `segments/`, each a sequence of records framed by a little-endian `u32`
//! length followed by the point's canonical JSON. The tag index lives in
//! memory and is rebuilt from the segments on open.
//!
//! Points with identical tags and timestamp resolve last-write-wins.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use parking_lot::{Mutex, RwLock};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::clock::{format_ms, from_millis, parse_rfc3339, Timestamp};
use crate::error::{Error, Result};

pub const TAG_DEVICE_ID: &str = "device_id";
pub const TAG_LOCATION_GENERAL: &str = "location_general";
pub const TAG_LOCATION_SPECIFIC: &str = "location_specific";
pub const TAG_FIELDNAME: &str = "fieldname";
pub const TAG_SYSTEM_VERSION: &str = "system_version";

/// Tags every stored point carries, in canonical serialization order.
pub const REQUIRED_TAGS: [&str; 5] =
    [TAG_DEVICE_ID, TAG_LOCATION_GENERAL, TAG_LOCATION_SPECIFIC, TAG_FIELDNAME, TAG_SYSTEM_VERSION];

pub const VALUE_FIELD: &str = "value";

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagSet(BTreeMap<String, String>);

impl TagSet {
    pub fn new(device_id: &str, general: &str, specific: &str, fieldname: &str, version: &str) -> Self {
        let mut tags = BTreeMap::new();
        tags.insert(TAG_DEVICE_ID.to_owned(), device_id.to_owned());
        tags.insert(TAG_LOCATION_GENERAL.to_owned(), general.to_owned());
        tags.insert(TAG_LOCATION_SPECIFIC.to_owned(), specific.to_owned());
        tags.insert(TAG_FIELDNAME.to_owned(), fieldname.to_owned());
        tags.insert(TAG_SYSTEM_VERSION.to_owned(), version.to_owned());
        TagSet(tags)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn device_id(&self) -> &str {
        self.get(TAG_DEVICE_ID).unwrap_or_default()
    }

    pub fn fieldname(&self) -> &str {
        self.get(TAG_FIELDNAME).unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Stamps location and version tags a device omitted.
    pub fn fill_missing(&mut self, general: &str, specific: &str, version: &str) {
        for (key, val) in [(TAG_LOCATION_GENERAL, general), (TAG_LOCATION_SPECIFIC, specific), (TAG_SYSTEM_VERSION, version)] {
            self.0.entry(key.to_owned()).or_insert_with(|| val.to_owned());
        }
    }

    fn missing_required(&self) -> Option<&'static str> {
        REQUIRED_TAGS.into_iter().find(|t| !self.0.contains_key(*t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Integer(i64),
    Real(f64),
    Boolean(bool),
}

impl FieldValue {
    pub fn as_f64(&self) -> f64 {
        match *self {
            FieldValue::Integer(i) => i as f64,
            FieldValue::Real(r) => r,
            FieldValue::Boolean(b) => f64::from(u8::from(b)),
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            FieldValue::Integer(i) => Some(i),
            _ => None,
        }
    }

    fn from_json(v: &Value) -> Option<Self> {
        match v {
            Value::Bool(b) => Some(FieldValue::Boolean(*b)),
            Value::Number(n) => n.as_i64().map(FieldValue::Integer).or_else(|| n.as_f64().map(FieldValue::Real)),
            _ => None,
        }
    }
}

impl Serialize for FieldValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            FieldValue::Integer(i) => s.serialize_i64(i),
            FieldValue::Real(r) => s.serialize_f64(r),
            FieldValue::Boolean(b) => s.serialize_bool(b),
        }
    }
}

/// Why a single point in a batch was not stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "code", content = "detail")]
pub enum RejectReason {
    UnknownDevice,
    RetiredDevice,
    UnknownField,
    MalformedTime,
    MissingTag(String),
    MissingValue,
    Malformed(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::UnknownDevice => f.write_str("unknown device"),
            RejectReason::RetiredDevice => f.write_str("device is retired"),
            RejectReason::UnknownField => f.write_str("fieldname not in the device's known fields"),
            RejectReason::MalformedTime => f.write_str("malformed time"),
            RejectReason::MissingTag(t) => write!(f, "missing tag {t}"),
            RejectReason::MissingValue => f.write_str("missing numeric value field"),
            RejectReason::Malformed(m) => write!(f, "malformed point: {m}"),
        }
    }
}

/// One timestamped record of tags and fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub time: Timestamp,
    pub tags: TagSet,
    pub fields: BTreeMap<String, FieldValue>,
}

impl DataPoint {
    pub fn new(time: Timestamp, tags: TagSet, value: FieldValue) -> Self {
        let mut fields = BTreeMap::new();
        fields.insert(VALUE_FIELD.to_owned(), value);
        DataPoint { time, tags, fields }
    }

    pub fn with_field(mut self, name: impl Into<String>, value: FieldValue) -> Self {
        self.fields.insert(name.into(), value);
        self
    }

    pub fn value(&self) -> f64 {
        self.fields.get(VALUE_FIELD).map(FieldValue::as_f64).unwrap_or(f64::NAN)
    }

    pub fn field(&self, name: &str) -> Option<FieldValue> {
        self.fields.get(name).copied()
    }

    /// Parses the flat wire object. String-valued keys other than `time` are
    /// tags; numeric and boolean keys are fields. Missing location and
    /// version tags are left absent for the caller to stamp.
    pub fn from_wire(v: &Value) -> std::result::Result<Self, RejectReason> {
        let obj = v.as_object().ok_or_else(|| RejectReason::Malformed("point is not an object".into()))?;
        let time = match obj.get("time") {
            Some(Value::String(s)) => parse_rfc3339(s).ok_or(RejectReason::MalformedTime)?,
            Some(_) => return Err(RejectReason::MalformedTime),
            None => return Err(RejectReason::MissingTag("time".into())),
        };
        let mut tags = TagSet::default();
        let mut fields = BTreeMap::new();
        for (key, val) in obj {
            if key == "time" {
                continue;
            }
            match val {
                Value::String(s) => tags.insert(key.clone(), s.clone()),
                other => {
                    let fv = FieldValue::from_json(other)
                        .ok_or_else(|| RejectReason::Malformed(format!("field {key} is not numeric or boolean")))?;
                    fields.insert(key.clone(), fv);
                }
            }
        }
        for required in [TAG_DEVICE_ID, TAG_FIELDNAME] {
            if tags.get(required).is_none_or(str::is_empty) {
                return Err(RejectReason::MissingTag(required.into()));
            }
        }
        if !fields.contains_key(VALUE_FIELD) {
            return Err(RejectReason::MissingValue);
        }
        Ok(DataPoint { time, tags, fields })
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("points always serialize")
    }
}

impl Serialize for DataPoint {
    /// Canonical order: time, the required tags, other tags by name, `value`,
    /// other fields by name.
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(1 + self.tags.0.len() + self.fields.len()))?;
        map.serialize_entry("time", &format_ms(&self.time))?;
        for tag in REQUIRED_TAGS {
            if let Some(v) = self.tags.get(tag) {
                map.serialize_entry(tag, v)?;
            }
        }
        for (k, v) in self.tags.iter().filter(|(k, _)| !REQUIRED_TAGS.contains(k)) {
            map.serialize_entry(k, v)?;
        }
        if let Some(v) = self.fields.get(VALUE_FIELD) {
            map.serialize_entry(VALUE_FIELD, v)?;
        }
        for (k, v) in self.fields.iter().filter(|(k, _)| k.as_str() != VALUE_FIELD) {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for DataPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Value::deserialize(d)?;
        DataPoint::from_wire(&raw).map_err(serde::de::Error::custom)
    }
}

/// Schema validation hook applied to every point on write.
pub trait SchemaCheck {
    fn check(&self, tags: &TagSet) -> std::result::Result<(), RejectReason>;

    /// Fills tags the sender may omit. Default: leave as is.
    fn complete(&self, _tags: &mut TagSet) {}
}

/// Accepts everything. Useful for replay and tests.
pub struct AcceptAll;

impl SchemaCheck for AcceptAll {
    fn check(&self, _: &TagSet) -> std::result::Result<(), RejectReason> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReceipt {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

/// Conjunction of tag equality predicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Selector(pub BTreeMap<String, String>);

impl Selector {
    pub fn new() -> Self {
        Selector::default()
    }

    pub fn tag(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.0.insert(name.into(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn matches(&self, tags: &TagSet) -> bool {
        self.0.iter().all(|(k, v)| tags.get(k) == Some(v.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Raw,
    Mean,
    Min,
    Max,
    Count,
}

impl FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Aggregate::Raw),
            "mean" => Ok(Aggregate::Mean),
            "min" => Ok(Aggregate::Min),
            "max" => Ok(Aggregate::Max),
            "count" => Ok(Aggregate::Count),
            other => Err(Error::UnknownAggregate(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub selector: Selector,
    #[serde(with = "crate::clock::serde_ms")]
    pub from: Timestamp,
    #[serde(with = "crate::clock::serde_ms")]
    pub to: Timestamp,
    pub agg: Aggregate,
    /// Window width in seconds; required unless `agg` is raw.
    #[serde(default)]
    pub every_s: Option<f64>,
}

impl Query {
    pub fn raw(selector: Selector, from: Timestamp, to: Timestamp) -> Self {
        Query { selector, from, to, agg: Aggregate::Raw, every_s: None }
    }

    pub fn aggregated(selector: Selector, from: Timestamp, to: Timestamp, agg: Aggregate, every_s: f64) -> Self {
        Query { selector, from, to, agg, every_s: Some(every_s) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(with = "crate::clock::serde_ms")]
    pub time: Timestamp,
    pub value: f64,
}

impl Sample {
    pub fn new(time: Timestamp, value: f64) -> Self {
        Sample { time, value }
    }
}

/// Time-ordered values for a selector. For a selector that pins a single
/// tag set the times are strictly increasing; broader raw selectors may
/// repeat a timestamp once per matching tag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub selector: Selector,
    pub points: Vec<Sample>,
}

impl Series {
    pub fn new(selector: Selector, points: Vec<Sample>) -> Self {
        Series { selector, points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Median gap between consecutive points, in seconds.
    pub fn median_interval_s(&self) -> Option<f64> {
        let mut gaps: Vec<i64> = self
            .points
            .windows(2)
            .map(|w| w[1].time.timestamp_millis() - w[0].time.timestamp_millis())
            .collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_unstable();
        let mid = gaps.len() / 2;
        let median_ms = if gaps.len() % 2 == 1 { gaps[mid] as f64 } else { (gaps[mid - 1] + gaps[mid]) as f64 / 2.0 };
        Some(median_ms / 1000.0)
    }
}

fn bucket_start(t_ms: i64, width_ms: i64) -> i64 {
    t_ms.div_euclid(width_ms) * width_ms
}

#[derive(Clone, Copy)]
struct Acc {
    sum: f64,
    min: f64,
    max: f64,
    count: u64,
}

impl Acc {
    fn new() -> Self {
        Acc { sum: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY, count: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.count += 1;
    }

    fn finish(&self, agg: Aggregate) -> f64 {
        match agg {
            Aggregate::Mean | Aggregate::Raw => self.sum / self.count as f64,
            Aggregate::Min => self.min,
            Aggregate::Max => self.max,
            Aggregate::Count => self.count as f64,
        }
    }
}

/// Buckets samples into epoch-aligned windows of `width_ms` and reduces each
/// non-empty window.
pub fn bucket(samples: &[Sample], width_ms: i64, agg: Aggregate) -> Vec<Sample> {
    let mut windows: BTreeMap<i64, Acc> = BTreeMap::new();
    for s in samples {
        windows.entry(bucket_start(s.time.timestamp_millis(), width_ms)).or_insert_with(Acc::new).push(s.value);
    }
    windows.into_iter().map(|(start, acc)| Sample::new(from_millis(start), acc.finish(agg))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aligned {
    pub series: Vec<Series>,
    pub common_interval_s: u64,
}

/// Brings several series onto one time base at the coarsest series'
/// interval. Finer series are averaged into the common bins; only bins
/// populated in every series are kept, so all outputs share timestamps.
pub fn align(series_list: &[Series]) -> Result<Aligned> {
    if series_list.len() < 2 {
        return Err(Error::EmptySeries);
    }
    let mut coarsest = 0.0_f64;
    for s in series_list {
        coarsest = coarsest.max(s.median_interval_s().ok_or(Error::EmptySeries)?);
    }
    let common_interval_s = (coarsest.ceil() as u64).max(1);
    let width_ms = common_interval_s as i64 * 1000;
    let binned: Vec<Vec<Sample>> = series_list.iter().map(|s| bucket(&s.points, width_ms, Aggregate::Mean)).collect();
    let mut shared: Vec<i64> = binned[0].iter().map(|s| s.time.timestamp_millis()).collect();
    for b in &binned[1..] {
        let times: std::collections::HashSet<i64> = b.iter().map(|s| s.time.timestamp_millis()).collect();
        shared.retain(|t| times.contains(t));
    }
    let series = binned
        .into_iter()
        .zip(series_list)
        .map(|(bins, original)| {
            let points = bins.into_iter().filter(|s| shared.binary_search(&s.time.timestamp_millis()).is_ok()).collect();
            Series::new(original.selector.clone(), points)
        })
        .collect();
    Ok(Aligned { series, common_interval_s })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NyquistVerdict {
    pub adequate: bool,
    pub required_interval_s: f64,
    pub median_interval_s: f64,
}

/// A series is adequate for a behavior when it samples at least twice per
/// behavior period.
pub fn nyquist_check(series: &Series, behavior_period_s: f64) -> Result<NyquistVerdict> {
    if !(behavior_period_s.is_finite() && behavior_period_s > 0.0) {
        return Err(Error::InvalidArgument("behavior_period_s must be positive".into()));
    }
    let median = series.median_interval_s().ok_or(Error::EmptySeries)?;
    let required = behavior_period_s / 2.0;
    Ok(NyquistVerdict { adequate: median <= required, required_interval_s: required, median_interval_s: median })
}

struct SeriesData {
    tags: TagSet,
    points: BTreeMap<i64, BTreeMap<String, FieldValue>>,
}

#[derive(Default)]
struct Index {
    series: Vec<SeriesData>,
    by_tags: HashMap<TagSet, usize>,
    postings: HashMap<(String, String), Vec<usize>>,
    point_count: usize,
}

impl Index {
    fn insert(&mut self, p: DataPoint) {
        let id = match self.by_tags.get(&p.tags) {
            Some(&id) => id,
            None => {
                let id = self.series.len();
                for (k, v) in p.tags.iter() {
                    self.postings.entry((k.to_owned(), v.to_owned())).or_default().push(id);
                }
                self.by_tags.insert(p.tags.clone(), id);
                self.series.push(SeriesData { tags: p.tags, points: BTreeMap::new() });
                id
            }
        };
        if self.series[id].points.insert(p.time.timestamp_millis(), p.fields).is_none() {
            self.point_count += 1;
        }
    }

    fn matching(&self, selector: &Selector) -> Vec<usize> {
        if selector.0.is_empty() {
            return (0..self.series.len()).collect();
        }
        let mut lists: Vec<&Vec<usize>> = Vec::with_capacity(selector.0.len());
        for (k, v) in &selector.0 {
            match self.postings.get(&(k.clone(), v.clone())) {
                Some(list) => lists.push(list),
                None => return Vec::new(),
            }
        }
        lists.sort_by_key(|l| l.len());
        let mut hits: Vec<usize> = lists[0].clone();
        for other in &lists[1..] {
            hits.retain(|id| other.binary_search(id).is_ok());
        }
        hits
    }
}

struct SegmentLog {
    dir: PathBuf,
    files: HashMap<NaiveDate, File>,
    sync: bool,
}

impl SegmentLog {
    fn path_for(dir: &Path, day: NaiveDate) -> PathBuf {
        dir.join(format!("{}.seg", day.format("%Y-%m-%d")))
    }

    fn append(&mut self, batch: &[DataPoint]) -> io::Result<()> {
        let mut touched = Vec::new();
        for p in batch {
            let day = p.time.date_naive();
            if !self.files.contains_key(&day) {
                let f = OpenOptions::new().create(true).append(true).open(Self::path_for(&self.dir, day))?;
                self.files.insert(day, f);
            }
            let body = p.to_canonical_json();
            let len = u32::try_from(body.len()).map_err(|_| io::Error::other("point too large"))?;
            let mut frame = Vec::with_capacity(4 + body.len());
            frame.extend_from_slice(&len.to_le_bytes());
            frame.extend_from_slice(body.as_bytes());
            let f = self.files.get_mut(&day).expect("opened above");
            f.write_all(&frame)?;
            if !touched.contains(&day) {
                touched.push(day);
            }
        }
        if self.sync {
            for day in touched {
                self.files[&day].sync_data()?;
            }
        }
        Ok(())
    }
}

/// Reads every complete record of a segment file. A torn trailing record is
/// truncated away.
fn replay_segment(path: &Path) -> Result<Vec<DataPoint>> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let mut points = Vec::new();
    let mut pos = 0usize;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        if pos + 4 + len > bytes.len() {
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        match serde_json::from_slice::<DataPoint>(body) {
            Ok(p) => points.push(p),
            Err(e) => {
                tracing::warn!(path = %path.display(), offset = pos, error = %e, "stopping replay at corrupt record");
                break;
            }
        }
        pos += 4 + len;
    }
    if pos != bytes.len() {
        tracing::warn!(path = %path.display(), kept = pos, total = bytes.len(), "truncating torn segment tail");
        f.set_len(pos as u64)?;
        f.seek(SeekFrom::End(0))?;
    }
    Ok(points)
}

/// The store. Writers serialize on the segment log; readers share the index.
pub struct TsStore {
    index: RwLock<Index>,
    log: Option<Mutex<SegmentLog>>,
    write_gate: Mutex<()>,
}

impl TsStore {
    pub fn in_memory() -> Self {
        TsStore { index: RwLock::new(Index::default()), log: None, write_gate: Mutex::new(()) }
    }

    /// Opens or creates a store rooted at `dir`, replaying all segments.
    pub fn open(dir: impl AsRef<Path>, sync: bool) -> Result<Self> {
        let seg_dir = dir.as_ref().join("segments");
        fs::create_dir_all(&seg_dir)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(&seg_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "seg"))
            .collect();
        paths.sort();
        let mut index = Index::default();
        for path in paths {
            for p in replay_segment(&path)? {
                index.insert(p);
            }
        }
        let log = SegmentLog { dir: seg_dir, files: HashMap::new(), sync };
        Ok(TsStore { index: RwLock::new(index), log: Some(Mutex::new(log)), write_gate: Mutex::new(()) })
    }

    /// Validates, persists and indexes a batch. Accepted points are durable
    /// and visible before this returns.
    pub fn write(&self, batch: Vec<DataPoint>, schema: &dyn SchemaCheck) -> Result<IngestReceipt> {
        let mut receipt = IngestReceipt::default();
        let mut good = Vec::with_capacity(batch.len());
        for (index, mut p) in batch.into_iter().enumerate() {
            schema.complete(&mut p.tags);
            let verdict = match p.tags.missing_required() {
                Some(tag) => Err(RejectReason::MissingTag(tag.into())),
                None if !p.fields.contains_key(VALUE_FIELD) => Err(RejectReason::MissingValue),
                None => schema.check(&p.tags),
            };
            match verdict {
                Ok(()) => good.push(p),
                Err(reason) => receipt.rejected.push(Rejection { index, reason }),
            }
        }
        receipt.accepted = good.len();
        if good.is_empty() {
            return Ok(receipt);
        }
        let _gate = self.write_gate.lock();
        if let Some(log) = &self.log {
            log.lock().append(&good)?;
        }
        let mut index = self.index.write();
        for p in good {
            index.insert(p);
        }
        Ok(receipt)
    }

    /// Parses a JSON array of wire points and writes it. Only a non-array
    /// envelope fails the whole call.
    pub fn write_wire(&self, batch: &Value, schema: &dyn SchemaCheck) -> Result<IngestReceipt> {
        let items = batch.as_array().ok_or_else(|| Error::MalformedBatch("expected a JSON array of points".into()))?;
        let mut parsed = Vec::with_capacity(items.len());
        let mut positions = Vec::with_capacity(items.len());
        let mut early = Vec::new();
        for (i, item) in items.iter().enumerate() {
            match DataPoint::from_wire(item) {
                Ok(p) => {
                    parsed.push(p);
                    positions.push(i);
                }
                Err(reason) => early.push(Rejection { index: i, reason }),
            }
        }
        let mut receipt = self.write(parsed, schema)?;
        for r in &mut receipt.rejected {
            r.index = positions[r.index];
        }
        receipt.rejected.extend(early);
        receipt.rejected.sort_by_key(|r| r.index);
        Ok(receipt)
    }

    pub fn len(&self) -> usize {
        self.index.read().point_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every distinct tag set matching `selector`.
    pub fn tag_sets(&self, selector: &Selector) -> Vec<TagSet> {
        let index = self.index.read();
        index.matching(selector).into_iter().map(|id| index.series[id].tags.clone()).collect()
    }

    /// Raw stored points in `[from, to)`, ordered by time then tag set.
    pub fn query_points(&self, selector: &Selector, from: Timestamp, to: Timestamp) -> Result<Vec<DataPoint>> {
        if from >= to {
            return Err(Error::InvalidRange(format!("from {} is not before to {}", format_ms(&from), format_ms(&to))));
        }
        let index = self.index.read();
        let mut ids = index.matching(selector);
        ids.sort_by(|a, b| index.series[*a].tags.cmp(&index.series[*b].tags));
        let mut out = Vec::new();
        for id in ids {
            let s = &index.series[id];
            for (t, fields) in s.points.range(from.timestamp_millis()..to.timestamp_millis()) {
                out.push(DataPoint { time: from_millis(*t), tags: s.tags.clone(), fields: fields.clone() });
            }
        }
        out.sort_by_key(|p| p.time);
        Ok(out)
    }

    pub fn query(&self, q: &Query) -> Result<Series> {
        if q.from >= q.to {
            return Err(Error::InvalidRange(format!("from {} is not before to {}", format_ms(&q.from), format_ms(&q.to))));
        }
        let width_ms = match (q.agg, q.every_s) {
            (Aggregate::Raw, _) => None,
            (_, Some(every)) if every.is_finite() && every * 1000.0 >= 1.0 => Some((every * 1000.0).round() as i64),
            (_, Some(_)) => return Err(Error::InvalidArgument("every must be at least one millisecond".into())),
            (_, None) => return Err(Error::InvalidArgument("every is required for aggregated queries".into())),
        };
        let samples: Vec<Sample> = {
            let index = self.index.read();
            let mut samples = Vec::new();
            let mut ids = index.matching(&q.selector);
            ids.sort_by(|a, b| index.series[*a].tags.cmp(&index.series[*b].tags));
            for id in ids {
                for (t, fields) in index.series[id].points.range(q.from.timestamp_millis()..q.to.timestamp_millis()) {
                    let v = fields.get(VALUE_FIELD).map(FieldValue::as_f64).unwrap_or(f64::NAN);
                    samples.push(Sample::new(from_millis(*t), v));
                }
            }
            samples
        };
        let points = match width_ms {
            None => {
                let mut s = samples;
                s.sort_by_key(|p| p.time);
                s
            }
            Some(w) => bucket(&samples, w, q.agg),
        };
        Ok(Series::new(q.selector.clone(), points))
    }
}

impl fmt::Debug for TsStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TsStore").field("points", &self.len()).field("persistent", &self.log.is_some()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANONICAL: &str = r#"{"time":"2020-12-23T23:54:50.727Z","device_id":"503eaa71b92a","location_general":"Link Lab","location_specific":"grid_5","fieldname":"heartbeat","system_version":"lll-1.0.0","value":1,"counter":256}"#;

    fn at(s: i64) -> Timestamp {
        from_millis(s * 1000)
    }

    fn pt(device: &str, field: &str, secs: i64, v: f64) -> DataPoint {
        DataPoint::new(at(secs), TagSet::new(device, "Link Lab", "grid_0", field, "lll-1.0.0"), FieldValue::Real(v))
    }

    #[test]
    fn canonical_point_round_trips() {
        let p: DataPoint = serde_json::from_str(CANONICAL).unwrap();
        assert_eq!(p.field("counter"), Some(FieldValue::Integer(256)));
        assert_eq!(p.to_canonical_json(), CANONICAL);
    }

    #[test]
    fn wire_rejections() {
        let v: Value = serde_json::from_str(r#"{"time":"yesterday","device_id":"a","fieldname":"x","value":1}"#).unwrap();
        assert_eq!(DataPoint::from_wire(&v), Err(RejectReason::MalformedTime));
        let v: Value = serde_json::from_str(r#"{"time":"2020-01-01T00:00:00Z","device_id":"a","fieldname":"x"}"#).unwrap();
        assert_eq!(DataPoint::from_wire(&v), Err(RejectReason::MissingValue));
        let v: Value = serde_json::from_str(r#"{"time":"2020-01-01T00:00:00Z","fieldname":"x","value":1}"#).unwrap();
        assert_eq!(DataPoint::from_wire(&v), Err(RejectReason::MissingTag("device_id".into())));
    }

    #[test]
    fn empty_batch() {
        let store = TsStore::in_memory();
        let r = store.write_wire(&serde_json::json!([]), &AcceptAll).unwrap();
        assert_eq!(r, IngestReceipt::default());
        assert!(matches!(store.write_wire(&serde_json::json!({}), &AcceptAll), Err(Error::MalformedBatch(_))));
    }

    #[test]
    fn mean_of_one_window() {
        let store = TsStore::in_memory();
        let batch = (0..4).map(|i| pt("d", "lux", i * 60, (i + 1) as f64)).collect();
        store.write(batch, &AcceptAll).unwrap();
        let q = Query::aggregated(Selector::new().tag("fieldname", "lux"), at(0), at(900), Aggregate::Mean, 900.0);
        let s = store.query(&q).unwrap();
        assert_eq!(s.points, vec![Sample::new(at(0), 2.5)]);
    }

    #[test]
    fn invalid_range_and_aggregate() {
        let store = TsStore::in_memory();
        assert!(matches!(store.query(&Query::raw(Selector::new(), at(5), at(5))), Err(Error::InvalidRange(_))));
        assert!(matches!("median".parse::<Aggregate>(), Err(Error::UnknownAggregate(_))));
        let no_every = Query { every_s: None, ..Query::aggregated(Selector::new(), at(0), at(1), Aggregate::Mean, 1.0) };
        assert!(matches!(store.query(&no_every), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn last_write_wins() {
        let store = TsStore::in_memory();
        store.write(vec![pt("d", "lux", 0, 1.0)], &AcceptAll).unwrap();
        store.write(vec![pt("d", "lux", 0, 7.0)], &AcceptAll).unwrap();
        assert_eq!(store.len(), 1);
        let s = store.query(&Query::raw(Selector::new(), at(0), at(1))).unwrap();
        assert_eq!(s.points, vec![Sample::new(at(0), 7.0)]);
    }

    #[test]
    fn raw_is_half_open() {
        let store = TsStore::in_memory();
        store.write((0..3).map(|i| pt("d", "lux", i * 10, i as f64)).collect(), &AcceptAll).unwrap();
        let s = store.query(&Query::raw(Selector::new().tag("device_id", "d"), at(0), at(20))).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn fields_are_not_predicates() {
        let store = TsStore::in_memory();
        store.write(vec![pt("d", "lux", 0, 1.0)], &AcceptAll).unwrap();
        let s = store.query(&Query::raw(Selector::new().tag("value", "1"), at(0), at(1))).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn nyquist_boundaries() {
        let series = |step: i64| Series::new(Selector::new(), (0..10).map(|i| Sample::new(at(i * step), 0.0)).collect());
        let v = nyquist_check(&series(900), 1800.0).unwrap();
        assert!(v.adequate);
        let v = nyquist_check(&series(900), 1.0).unwrap();
        assert!(!v.adequate);
        assert_eq!(v.required_interval_s, 0.5);
        assert!(nyquist_check(&series(1), 60.0).unwrap().adequate);
        let single = Series::new(Selector::new(), vec![Sample::new(at(0), 1.0)]);
        assert!(matches!(nyquist_check(&single, 60.0), Err(Error::EmptySeries)));
    }

    #[test]
    fn align_identity_for_equal_intervals() {
        let a = Series::new(Selector::new(), (0..5).map(|i| Sample::new(at(i * 60), i as f64)).collect());
        let b = Series::new(Selector::new(), (0..5).map(|i| Sample::new(at(i * 60), 10.0 * i as f64)).collect());
        let out = align(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.common_interval_s, 60);
        assert_eq!(out.series[0].points, a.points);
        assert_eq!(out.series[1].points, b.points);
        assert!(matches!(align(&[a]), Err(Error::EmptySeries)));
    }

    #[test]
    fn segments_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = TsStore::open(dir.path(), true).unwrap();
            store.write(vec![pt("d", "lux", 0, 1.0), pt("d", "lux", 86_400, 2.0)], &AcceptAll).unwrap();
        }
        let store = TsStore::open(dir.path(), true).unwrap();
        assert_eq!(store.len(), 2);
        let segs = fs::read_dir(dir.path().join("segments")).unwrap().count();
        assert_eq!(segs, 2);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = TsStore::open(dir.path(), true).unwrap();
            store.write(vec![pt("d", "lux", 0, 1.0)], &AcceptAll).unwrap();
        }
        let seg = dir.path().join("segments").join("1970-01-01.seg");
        let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(&[200, 0, 0, 0, b'{']).unwrap();
        drop(f);
        let store = TsStore::open(dir.path(), true).unwrap();
        assert_eq!(store.len(), 1);
        store.write(vec![pt("d", "lux", 10, 1.0)], &AcceptAll).unwrap();
        drop(store);
        assert_eq!(TsStore::open(dir.path(), true).unwrap().len(), 2);
    }

    #[test]
    fn segment_framing_is_le_length_prefixed() {
        let dir = tempfile::tempdir().unwrap();
        let store = TsStore::open(dir.path(), false).unwrap();
        let p: DataPoint = serde_json::from_str(CANONICAL).unwrap();
        store.write(vec![p], &AcceptAll).unwrap();
        let bytes = fs::read(dir.path().join("segments").join("2020-12-23.seg")).unwrap();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, CANONICAL.len());
        assert_eq!(&bytes[4..], CANONICAL.as_bytes());
    }
}
