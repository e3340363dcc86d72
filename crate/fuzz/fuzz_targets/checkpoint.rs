#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::model::SavedModel;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = SavedModel::from_json(s) {
        let text = m.to_json();
        let again = SavedModel::from_json(&text).expect("written checkpoints load");
        assert_eq!(again.to_json(), text);
    }
});
