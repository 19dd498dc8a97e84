#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::corpus::{read_corpus_from, write_corpus_to};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_corpus_from(data) {
        let mut out = Vec::new();
        write_corpus_to(&mut out, &records).unwrap();
        assert_eq!(read_corpus_from(out.as_slice()).unwrap(), records);
    }
});
