mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{new_member, ts, Harness};
use lablink::clock::Timestamp;
use lablink::dashboards::OwnerKind;
use lablink::devices::{DeviceSpec, FieldSpec, ValueKind};
use lablink::faultwatch::{detect_consensus_outlier, detect_partial_loss, estimate_loss, PlacedSeries, Thresholds, Window};
use lablink::floorplan::{CellIndex, FloorPlan, GridCell};
use lablink::ids::DeviceId;
use lablink::registry::Role;
use lablink::surveys::{Cadence, ComplianceFilter};
use lablink::tsstore::{align, Aggregate, DataPoint, FieldValue, Query, RejectReason, Sample, SchemaCheck, Selector, Series, TagSet, TsStore};
use lablink::ServiceConfig;
use proptest::prelude::*;
use serde_json::json;

struct AcceptAll;

impl SchemaCheck for AcceptAll {
    fn check(&self, _: &TagSet) -> Result<(), RejectReason> {
        Ok(())
    }
}

fn t0() -> Timestamp {
    ts("2021-01-04T00:00:00Z")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn radius_is_monotone(
        cols in 1u32..30, rows in 1u32..30, size in 0.2f64..3.0,
        devices in prop::collection::vec((0u32..30, 0u32..30), 0..60),
        origin in (0u32..30, 0u32..30), r1 in 0.0f64..20.0, extra in 0.0f64..20.0,
    ) {
        let plan = FloorPlan::new("p", size, cols, rows).unwrap();
        let mut index = CellIndex::default();
        for (i, (c, r)) in devices.iter().enumerate() {
            index.insert(GridCell::new(c % cols, r % rows), DeviceId::from(format!("d{i}").as_str()));
        }
        let origin = GridCell::new(origin.0 % cols, origin.1 % rows);
        let small: BTreeSet<_> = index.within(&plan, origin, r1).into_iter().collect();
        let large: BTreeSet<_> = index.within(&plan, origin, r1 + extra).into_iter().collect();
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn snap_of_center_and_label_round_trip(cols in 1u32..200, rows in 1u32..200, size in 0.05f64..10.0, k in any::<u64>()) {
        let plan = FloorPlan::new("p", size, cols, rows).unwrap();
        let k = k % plan.cell_count();
        let label = format!("grid_{k}");
        let cell = plan.parse_label(&label).unwrap();
        prop_assert_eq!(cell, GridCell::new((k % u64::from(cols)) as u32, (k / u64::from(cols)) as u32));
        prop_assert_eq!(plan.label(cell), label);
        let (x, y) = plan.cell_center(cell);
        prop_assert_eq!(plan.snap_to_grid(x, y).unwrap(), cell);
        let past_end = format!("grid_{}", plan.cell_count());
        prop_assert!(plan.parse_label(&past_end).is_none());
    }

    #[test]
    fn loss_rate_is_a_fraction(counters in prop::collection::vec(any::<i64>(), 2..200), modulus in 2i64..70_000) {
        let e = estimate_loss(&counters, modulus).unwrap();
        prop_assert!((0.0..=1.0).contains(&e.loss_rate));
        prop_assert!(e.received <= e.expected);
    }

    #[test]
    fn deleting_k_interior_points_gives_k_over_n_plus_k_minus_1(
        total in 3usize..600, start in 0i64..65_536, modulus in prop::sample::select(vec![16i64, 256, 65_536]),
        drop_mask in prop::collection::vec(any::<bool>(), 600),
    ) {
        let run: Vec<i64> = (0..total as i64).map(|i| (start + i) % modulus).collect();
        // Keep the ends and never drop a run long enough to alias the counter.
        let mut kept = Vec::new();
        let mut streak = 0i64;
        for (i, c) in run.iter().enumerate() {
            let interior = i > 0 && i + 1 < total;
            if interior && drop_mask[i] && streak + 2 < modulus {
                streak += 1;
            } else {
                streak = 0;
                kept.push(*c);
            }
        }
        let n = kept.len();
        let k = total - n;
        let device = DeviceId::from("d");
        let points: Vec<DataPoint> = kept
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let tags = TagSet::new("d", "Lab", "grid_0", "lux", "v1");
                DataPoint::new(t0() + chrono::Duration::seconds(i as i64), tags, FieldValue::Real(1.0)).with_field("counter", FieldValue::Integer(*c))
            })
            .collect();
        let window = Window::new(t0(), t0() + chrono::Duration::days(1)).unwrap();
        let th = Thresholds { partial_loss_rate: -1.0, ..Thresholds::default() };
        let report = detect_partial_loss(&device, "lux", &points, window, modulus, &th).unwrap().unwrap();
        let want = k as f64 / (n + k - 1) as f64;
        prop_assert!((report.evidence["loss_rate"] - want).abs() <= 1e-9);
        prop_assert!(report.window_start >= window.start && report.window_end <= window.end);
    }

    #[test]
    fn aggregate_equals_client_side_reduction(
        raw in prop::collection::vec((0usize..3, 0usize..2, 0i64..86_400, -1000i32..1000), 1..300),
        pick_device in prop::option::of(0usize..3), pick_field in prop::option::of(0usize..2),
        every in prop::sample::select(vec![60.0f64, 900.0, 3600.0, 86_400.0]),
    ) {
        let store = TsStore::in_memory();
        let fields = ["lux", "temperature"];
        let batch: Vec<DataPoint> = raw
            .iter()
            .map(|(d, f, s, v)| {
                let tags = TagSet::new(&format!("dev{d}"), "Lab", &format!("grid_{d}"), fields[*f], "v1");
                DataPoint::new(t0() + chrono::Duration::seconds(*s), tags, FieldValue::Real(f64::from(*v) / 8.0))
            })
            .collect();
        store.write(batch, &AcceptAll).unwrap();
        let mut selector = Selector::new();
        if let Some(d) = pick_device {
            selector = selector.tag("device_id", format!("dev{d}"));
        }
        if let Some(f) = pick_field {
            selector = selector.tag("fieldname", fields[f]);
        }
        let (from, to) = (t0(), t0() + chrono::Duration::days(1));
        let raw_q = Query { selector: selector.clone(), from, to, agg: Aggregate::Raw, every_s: None };
        let raw_series = store.query(&raw_q).unwrap();
        prop_assert_eq!(&raw_series, &store.query(&raw_q).unwrap());

        let width = (every * 1000.0) as i64;
        let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for s in &raw_series.points {
            let ms = s.time.timestamp_millis();
            groups.entry(ms - ms.rem_euclid(width)).or_default().push(s.value);
        }
        for agg in [Aggregate::Mean, Aggregate::Min, Aggregate::Max, Aggregate::Count] {
            let got = store.query(&Query { selector: selector.clone(), from, to, agg, every_s: Some(every) }).unwrap();
            prop_assert_eq!(got.points.len(), groups.len());
            for (s, (start, vals)) in got.points.iter().zip(&groups) {
                let want = match agg {
                    Aggregate::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                    Aggregate::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
                    Aggregate::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    _ => vals.len() as f64,
                };
                prop_assert_eq!(s.time.timestamp_millis(), *start);
                prop_assert!((s.value - want).abs() <= 1e-9 * want.abs().max(1.0), "{:?} {} vs {}", agg, s.value, want);
            }
        }
    }

    #[test]
    fn aligned_series_share_timestamps(
        intervals in prop::collection::vec(prop::sample::select(vec![60i64, 300, 900, 1800]), 2..5),
        offsets in prop::collection::vec(0i64..59, 5),
        span_h in 1i64..8,
    ) {
        let series: Vec<Series> = intervals
            .iter()
            .enumerate()
            .map(|(i, iv)| {
                let n = span_h * 3600 / iv;
                let pts = (0..n).map(|j| Sample::new(t0() + chrono::Duration::seconds(j * iv + offsets[i]), j as f64)).collect();
                Series::new(Selector::new().tag("device_id", format!("d{i}")), pts)
            })
            .collect();
        let aligned = align(&series).unwrap();
        prop_assert_eq!(aligned.common_interval_s as i64, *intervals.iter().max().unwrap());
        let first: Vec<Timestamp> = aligned.series[0].points.iter().map(|s| s.time).collect();
        for s in &aligned.series {
            let times: Vec<Timestamp> = s.points.iter().map(|p| p.time).collect();
            prop_assert_eq!(&times, &first);
        }
    }

    #[test]
    fn consensus_ignores_a_shared_offset_and_finds_a_lone_one(
        seed_values in prop::collection::vec(-1.0f64..1.0, 9 * 24),
        offset in -500.0f64..500.0, lone in 0usize..9, lone_offset in 60.0f64..400.0,
    ) {
        let window = Window::new(t0(), t0() + chrono::Duration::days(1)).unwrap();
        let plan = FloorPlan::new("p", 1.0, 3, 3).unwrap();
        let th = Thresholds::default();
        let build = |shift: &dyn Fn(usize) -> f64| -> Vec<PlacedSeries> {
            (0..9)
                .map(|d| PlacedSeries {
                    device_id: DeviceId::from(format!("d{d}").as_str()),
                    cell: GridCell::new((d % 3) as u32, (d / 3) as u32),
                    samples: (0..24)
                        .map(|h| {
                            let signal = 100.0 + 50.0 * (h as f64 / 24.0 * std::f64::consts::TAU).sin();
                            Sample::new(t0() + chrono::Duration::hours(h as i64), signal + seed_values[d * 24 + h] + shift(d))
                        })
                        .collect(),
                })
                .collect()
        };
        let flagged = |series: &[PlacedSeries]| -> BTreeSet<String> {
            detect_consensus_outlier(&plan, "lux", series, window, &th).unwrap().into_iter().map(|r| r.device_id.to_string()).collect()
        };
        let base = flagged(&build(&|_| 0.0));
        prop_assert_eq!(flagged(&build(&|_| offset)), base);
        let lone_flags = flagged(&build(&|d| if d == lone { lone_offset } else { 0.0 }));
        prop_assert_eq!(lone_flags, BTreeSet::from([format!("d{lone}")]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ingestion_accepts_exactly_known_fieldnames(names in prop::collection::vec(
        prop_oneof![
            prop::sample::select(vec!["lux".to_string(), "temperature".to_string(), "counter".to_string()]),
            "[a-zA-Z_ ]{0,12}",
            prop::sample::select(vec!["Lux".to_string(), "lux ".to_string(), "".to_string(), "value".to_string()]),
        ],
        1..40,
    )) {
        let h = Harness::new(ServiceConfig::default());
        let fields = vec![FieldSpec::new("lux", ValueKind::Real), FieldSpec::new("temperature", ValueKind::Real), FieldSpec::new("counter", ValueKind::Integer)];
        h.lab.register_device(&h.root(), DeviceSpec::new("dev1", fields)).unwrap();
        let known = h.lab.list_known_fields(&h.root(), &DeviceId::from("dev1")).unwrap();
        let batch: Vec<_> = names
            .iter()
            .enumerate()
            .map(|(i, f)| json!({ "time": format!("2021-01-04T00:00:{:02}.000Z", i), "device_id": "dev1", "fieldname": f, "value": 1.5 }))
            .collect();
        let receipt = h.lab.ingest(&h.root(), &json!(batch)).unwrap();
        let rejected: BTreeSet<usize> = receipt.rejected.iter().map(|r| r.index).collect();
        for (i, f) in names.iter().enumerate() {
            prop_assert_eq!(known.contains(f), !rejected.contains(&i), "fieldname {:?}", f);
        }
        prop_assert_eq!(receipt.accepted, names.iter().filter(|f| known.contains(*f)).count());
    }

    #[test]
    fn dashboards_track_members_plus_active_devices(ops in prop::collection::vec((0u8..4, any::<u16>()), 1..40)) {
        let h = Harness::new(ServiceConfig::default());
        let root = h.root();
        let mut members = Vec::new();
        let mut devices = Vec::new();
        for (i, (op, pick)) in ops.iter().enumerate() {
            match op {
                0 => members.push(h.lab.create_member(&root, new_member(&format!("u{i}"), Role::User)).unwrap().member_id),
                1 if !members.is_empty() => {
                    let id = members.remove(*pick as usize % members.len());
                    h.lab.delete_member(&root, &id).unwrap();
                }
                2 => {
                    let spec = DeviceSpec::new(&format!("dev{i}"), vec![FieldSpec::new("lux", ValueKind::Real)]);
                    devices.push(h.lab.register_device(&root, spec).unwrap().device_id);
                }
                3 if !devices.is_empty() => {
                    let id = devices.remove(*pick as usize % devices.len());
                    h.lab.retire_device(&root, &id).unwrap();
                }
                _ => {}
            }
            let c = h.lab.counts();
            prop_assert_eq!(c.dashboards, c.members + c.active_devices);
        }
    }

    #[test]
    fn compliance_never_exceeds_assignments(
        plan in prop::collection::vec((0usize..4, 0i64..6, any::<bool>()), 1..30),
        filter_member in prop::option::of(0usize..4), from_day in prop::option::of(0i64..6),
    ) {
        let h = Harness::at(ServiceConfig::default(), ts("2021-01-04T00:00:00Z"));
        let root = h.root();
        let members: Vec<_> = (0..4).map(|i| h.member(&format!("m{i}"), Role::User).0).collect();
        let t = h.lab.add_template(&root, "daily", "https://surveys.example/d", Cadence::Daily).unwrap();
        let mut to_complete = Vec::new();
        for (m, day, done) in &plan {
            let open = ts("2021-01-04T09:00:00Z") + chrono::Duration::days(*day);
            if let Ok((a, _)) = h.lab.schedule(&root, &members[*m].member_id, &t.template_id, open, open + chrono::Duration::hours(6)) {
                if *done {
                    to_complete.push(a);
                }
            }
        }
        for a in to_complete {
            h.clock.set(a.open_time + chrono::Duration::hours(1));
            h.lab.record_completion(&root, &a.anonymous_id, json!({ "q1": 3 })).unwrap();
        }
        let filter = ComplianceFilter {
            member_id: filter_member.map(|i| members[i].member_id.clone()),
            template_id: None,
            from: from_day.map(|d| ts("2021-01-04T00:00:00Z") + chrono::Duration::days(d)),
            to: None,
        };
        let root = h.lab.member(&h.admin.member_id).unwrap().principal();
        h.clock.set(ts("2021-01-04T00:00:00Z"));
        let rows = h.lab.compliance(&root, &filter).unwrap();
        for r in &rows {
            prop_assert!(r.completed <= r.assigned);
        }
        prop_assert!(rows.iter().map(|r| r.completed).sum::<u64>() <= rows.iter().map(|r| r.assigned).sum::<u64>());
    }
}

#[test]
fn render_stays_in_owner_scope() {
    let h = Harness::new(ServiceConfig::default());
    let root = h.root();
    for id in ["a1", "b2"] {
        h.lab.register_device(&root, DeviceSpec::new(id, vec![FieldSpec::new("lux", ValueKind::Real)])).unwrap();
    }
    let batch = json!([
        { "time": "2021-01-04T11:00:00.000Z", "device_id": "a1", "fieldname": "lux", "value": 10 },
        { "time": "2021-01-04T11:00:00.000Z", "device_id": "b2", "fieldname": "lux", "value": 20 },
    ]);
    h.lab.ingest(&root, &batch).unwrap();
    let rendered = h.lab.render_dashboard(&root, OwnerKind::Device, "a1").unwrap();
    assert!(!rendered.panels.is_empty());
    for p in &rendered.panels {
        assert_eq!(p.selector.get("device_id"), Some("a1"));
        assert!(p.points.iter().all(|s| s.value == 10.0), "{:?}", p.points);
    }

    let escape = json!({
        "panels": [{
            "title": "other device",
            "query": { "selector": { "device_id": "b2", "fieldname": "lux" }, "agg": "raw" },
            "render_hint": "line"
        }]
    });
    let r = h.call("PATCH", "/api/v1/dashboards/device/a1", Some(&h.token), Some(&escape.to_string()));
    assert!(r.status.is_client_error(), "{} {}", r.status, r.text);
    let after = h.lab.render_dashboard(&root, OwnerKind::Device, "a1").unwrap();
    assert!(after.panels.iter().all(|p| p.selector.get("device_id") == Some("a1")));
}

#[test]
fn stored_points_survive_reopen_and_queries_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig { data_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() };
    let batch: Vec<_> = (0..200)
        .map(|i| json!({ "time": format!("2021-01-04T{:02}:{:02}:00.000Z", i / 60, i % 60), "device_id": "a1", "fieldname": "lux", "value": i, "counter": i % 256 }))
        .collect();
    let first = {
        let h = Harness::new(config.clone());
        h.lab.register_device(&h.root(), DeviceSpec::new("a1", vec![FieldSpec::new("lux", ValueKind::Real)])).unwrap();
        let receipt = h.lab.ingest(&h.root(), &json!(batch)).unwrap();
        assert_eq!(receipt.accepted, 200);
        h.get("/api/v1/query?tag.device_id=a1&from=2021-01-04T00:00:00Z&to=2021-01-05T00:00:00Z").text
    };
    let clock = std::sync::Arc::new(lablink::clock::ManualClock::new(ts("2021-01-04T12:00:00Z")));
    let lab = lablink::Lab::with_clock(config, clock).unwrap();
    let counts = lab.counts();
    assert_eq!((counts.points, counts.devices, counts.members), (200, 1, 1));
    let pts = lab.store().query_points(&Selector::new().tag("device_id", "a1"), ts("2021-01-04T00:00:00Z"), ts("2021-01-05T00:00:00Z")).unwrap();
    let again: Vec<String> = pts.iter().map(DataPoint::to_canonical_json).collect();
    assert_eq!(again.len(), 200);
    for line in &again {
        assert!(first.contains(line.as_str()));
    }
}
