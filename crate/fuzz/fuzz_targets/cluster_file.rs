#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::clustering::ClusterModel;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = ClusterModel::parse(s) {
        let again = ClusterModel::parse(&m.to_text()).expect("written cluster files parse");
        assert_eq!(again.centroids, m.centroids);
    }
});
