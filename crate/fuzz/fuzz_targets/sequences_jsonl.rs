#![no_main]

use libfuzzer_sys::fuzz_target;
use nextdrop::ingest::{read_sequences, write_sequences};

fuzz_target!(|data: &[u8]| {
    if let Ok(seqs) = read_sequences(data) {
        let mut out = Vec::new();
        write_sequences(&mut out, &seqs).expect("in-memory write");
        assert_eq!(read_sequences(out.as_slice()).expect("written sequences read back"), seqs);
    }
});
