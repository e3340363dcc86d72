#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::ingest::{parse_trips_from_reader, TripFormat};

fuzz_target!(|data: &[u8]| {
    if let Ok(parsed) = parse_trips_from_reader(data, TripFormat::PolylineCsv) {
        for r in &parsed.records {
            assert!(r.end_time >= r.start_time);
            let pts = r.raw_polyline.as_ref().expect("polyline rows keep their trace");
            assert_eq!((pts.first(), pts.last()), (Some(&r.pickup), Some(&r.dropoff)));
        }
    }
});
