#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::detect::{ingest_detections_from, write_detections};

fuzz_target!(|data: &[u8]| {
    if let Ok(sets) = ingest_detections_from(data) {
        let mut out = Vec::new();
        write_detections(&mut out, &sets).unwrap();
        assert_eq!(ingest_detections_from(out.as_slice()).unwrap(), sets);
    }
});
