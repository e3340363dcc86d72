#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::ingest::parse_polyline;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(pts) = parse_polyline(s) {
            assert!(pts.iter().all(|p| p.lat().abs() <= 90.0 && p.lon().is_finite()));
        }
    }
});
