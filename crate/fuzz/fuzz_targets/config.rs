#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use nextdrop::experiment::ExperimentSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(spec) = ExperimentSpec::parse(s, Path::new(".")) {
            assert!(spec.validate().is_ok());
        }
    }
});
