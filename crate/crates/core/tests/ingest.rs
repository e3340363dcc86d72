use std::collections::HashMap;
use std::path::PathBuf;

use nextdrop::geo::Coordinate;
use nextdrop::ingest::{
    build_sequences, derive_temporal_meta, hours, parse_pois, parse_trips, write_sequences, HolidayCalendar,
    MacroCategory, SequenceOptions, TripFormat, TripRecord,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn c(lat: f64, lon: f64) -> Coordinate {
    Coordinate::new(lat, lon).unwrap()
}

#[test]
fn ten_trip_fixture_parses_to_hand_list() {
    let parsed = parse_trips(&fixture("trips_10.csv"), TripFormat::PolylineCsv).unwrap();
    assert!(parsed.rejects.is_empty());
    // (driver, start, end, pickup, dropoff, points, day_type, call_type)
    let expected = [
        ("20000001", 1372636800, 1372636830, c(41.141412, -8.618643), c(41.14251, -8.620326), 3, "A", "C"),
        ("20000001", 1372638600, 1372638615, c(41.14251, -8.620326), c(41.143815, -8.622153), 2, "A", "C"),
        ("20000002", 1372640000, 1372640015, c(41.159, -8.639), c(41.1587, -8.6401), 2, "B", "A"),
        ("20000001", 1372640400, 1372640445, c(41.1455, -8.6106), c(41.148, -8.614), 4, "A", "B"),
        ("20000001", 1372642200, 1372642215, c(41.1575, -8.6302), c(41.1562, -8.6291), 2, "A", "C"),
        ("20000003", 1372650000, 1372650030, c(41.14, -8.61), c(41.145, -8.6), 3, "A", "C"),
        ("20000002", 1372647200, 1372647230, c(41.1587, -8.6401), c(41.145, -8.66), 3, "B", "C"),
        ("20000002", 1372648100, 1372648115, c(41.145, -8.66), c(41.149, -8.655), 2, "B", "C"),
        ("20000001", 1372660200, 1372660230, c(41.162, -8.585), c(41.165, -8.59), 3, "A", "C"),
        ("20000001", 1372663800, 1372663815, c(41.165, -8.59), c(41.159, -8.601), 2, "A", "C"),
    ];
    assert_eq!(parsed.records.len(), expected.len());
    for (r, e) in parsed.records.iter().zip(&expected) {
        assert_eq!(r.driver_id, e.0);
        assert_eq!((r.start_time, r.end_time), (e.1, e.2));
        assert_eq!((r.pickup, r.dropoff), (e.3, e.4));
        assert_eq!(r.raw_polyline.as_ref().map(Vec::len), Some(e.5));
        assert_eq!(r.metadata["day_type"], e.6);
        assert_eq!(r.metadata["call_type"], e.7);
    }

    // driver 1: shift of four trips, a five-hour break, then two more;
    // driver 2: three trips within two hours; driver 3: a single trip
    let seqs = build_sequences(parsed.records, &SequenceOptions::default()).unwrap();
    let lens: Vec<(&str, usize)> = seqs.iter().map(|s| (s.driver_id.as_str(), s.history.len())).collect();
    assert_eq!(lens, [("20000001", 2), ("20000001", 4), ("20000001", 6), ("20000001", 2), ("20000002", 2), ("20000002", 4)]);
    // native day type B (holiday) overrides the workday calendar
    assert!(seqs[4].step_meta.iter().all(|m| m.day_type == 2));
    assert!(seqs[0].step_meta.iter().all(|m| m.day_type == 0));
}

#[test]
fn twenty_poi_fixture_histogram() {
    let parsed = parse_pois(&fixture("pois_20.txt")).unwrap();
    assert!(parsed.rejects.is_empty(), "{:?}", parsed.rejects);
    assert_eq!(parsed.pois.len(), 20);
    let mut hist = [0usize; 10];
    for p in &parsed.pois {
        hist[p.macro_category.index()] += 1;
    }
    // arts, college, event, food, nightlife, outdoors, professional, residence, shop, travel
    assert_eq!(hist, [2, 1, 1, 4, 3, 2, 1, 1, 3, 2]);
    let chinese = &parsed.pois[3];
    assert_eq!(chinese.macro_category, MacroCategory::Food);
    assert_eq!(chinese.category_path, ["Food", "Asian Restaurant", "Chinese Restaurant"]);
    assert_eq!(parsed.pois[17].name, "Edificio Transparente, Offices");
}

#[test]
fn six_hourly_trips_give_growing_then_capped_histories() {
    let trips: Vec<TripRecord> = (0..6)
        .map(|i| TripRecord {
            driver_id: "d".into(),
            start_time: 1_700_000_000 + hours(i),
            end_time: 1_700_000_000 + hours(i) + 600,
            pickup: c(41.1, -8.6),
            dropoff: c(41.2, -8.5),
            raw_polyline: None,
            metadata: Default::default(),
        })
        .collect();
    let seqs = build_sequences(trips, &SequenceOptions::default()).unwrap();
    let lens: Vec<usize> = seqs.iter().map(|s| s.history.len()).collect();
    assert_eq!(lens, [2, 4, 6, 8, 8]);
}

#[test]
fn friday_before_weekend_is_pre_holiday() {
    let cal = HolidayCalendar::parse("2024-03-13\n").unwrap();
    let tz = chrono_tz::Europe::Lisbon;
    // Fri 2024-03-08 12:00 UTC, Tue 2024-03-12, Wed 2024-03-13 (holiday)
    assert_eq!(derive_temporal_meta(1_709_899_200, &cal, tz).day_type, 1);
    assert_eq!(derive_temporal_meta(1_710_244_800, &cal, tz).day_type, 1);
    assert_eq!(derive_temporal_meta(1_710_331_200, &cal, tz).day_type, 2);
    assert_eq!(derive_temporal_meta(1_710_158_400, &cal, tz).day_type, 0);
}

fn trip_stream() -> impl Strategy<Value = Vec<TripRecord>> {
    // (driver, idle gap before the trip, duration), gaps occasionally beyond 3 h
    let trip = (0u8..3, prop_oneof![4 => 0i64..7200, 1 => 10_000i64..40_000], 60i64..4000);
    prop::collection::vec(trip, 1..60).prop_map(|raw| {
        let mut clock = [1_700_000_000i64; 3];
        raw.into_iter()
            .enumerate()
            .map(|(i, (d, gap, dur))| {
                let start = clock[d as usize] + gap;
                clock[d as usize] = start + dur;
                let f = i as f64 * 1e-3;
                TripRecord {
                    driver_id: format!("drv{d}"),
                    start_time: start,
                    end_time: start + dur,
                    pickup: c(41.1 + f, -8.6),
                    dropoff: c(41.2, -8.6 + f),
                    raw_polyline: None,
                    metadata: Default::default(),
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn randomized_streams_respect_sequence_invariants(trips in trip_stream()) {
        let opts = SequenceOptions::default();
        let seqs = build_sequences(trips.clone(), &opts).unwrap();
        let by_pickup: HashMap<(i64, String), &TripRecord> =
            trips.iter().map(|t| ((t.start_time, t.driver_id.clone()), t)).collect();
        for s in &seqs {
            prop_assert!(s.check(8, hours(3)).is_ok());
            prop_assert!(s.history.len() % 2 == 0 && s.history.len() <= 8 && !s.history.is_empty());
            for pair in s.history.chunks(2) {
                let origin = by_pickup[&(pair[0].t, s.driver_id.clone())];
                prop_assert_eq!(pair[0].loc, origin.pickup);
                prop_assert_eq!(pair[1].loc, origin.dropoff);
                prop_assert_eq!(pair[1].t, origin.end_time);
            }
            let pts: Vec<_> = s.points().collect();
            // strict within a trip, non-decreasing between trips
            for (i, w) in pts.windows(2).enumerate() {
                let gap = w[1].t - w[0].t;
                let min_gap = if i % 2 == 0 { 1 } else { 0 };
                prop_assert!((min_gap..=hours(3)).contains(&gap), "gap {} at {}", gap, i);
            }
            let cur = by_pickup[&(s.current_pickup.t, s.driver_id.clone())];
            prop_assert_eq!(s.target, Some(cur.dropoff));
        }

        // an uninterrupted shift of n trips yields n - 1 samples
        let mut per_driver: HashMap<&str, Vec<&TripRecord>> = HashMap::new();
        for t in &trips {
            per_driver.entry(t.driver_id.as_str()).or_default().push(t);
        }
        let mut expected = 0;
        for ts in per_driver.values() {
            for j in 1..ts.len() {
                let idle = ts[j].start_time - ts[j - 1].end_time;
                if ts[j - 1].end_time - ts[j - 1].start_time <= hours(3) && (0..=hours(3)).contains(&idle) {
                    expected += 1;
                }
            }
        }
        prop_assert_eq!(seqs.len(), expected);

        let mut a = Vec::new();
        let mut b = Vec::new();
        write_sequences(&mut a, &seqs).unwrap();
        write_sequences(&mut b, &build_sequences(trips, &opts).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}
