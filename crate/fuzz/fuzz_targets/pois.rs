#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::ingest::parse_pois_str;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let parsed = parse_pois_str(s);
        assert!(parsed.pois.iter().all(|p| !p.category_path.is_empty()));
    }
});
