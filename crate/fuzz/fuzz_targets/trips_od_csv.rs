#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::ingest::{parse_trips_from_reader, TripFormat};

fuzz_target!(|data: &[u8]| {
    if let Ok(parsed) = parse_trips_from_reader(data, TripFormat::OdCsv) {
        assert!(parsed.records.iter().all(|r| r.raw_polyline.is_none()));
    }
});
