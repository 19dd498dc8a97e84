#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::corpus::{parse_report, segment_sentences};

fuzz_target!(|text: &str| {
    for s in segment_sentences(text) {
        assert!(!s.trim().is_empty());
    }
    if let Ok(report) = parse_report("fuzz", text) {
        let mut end = 0;
        for section in report.sections() {
            assert!(section.span.start >= end);
            end = section.span.end;
        }
        assert!(end <= text.len());
        let again = parse_report("fuzz", &report.render()).expect("rendered report parses");
        assert_eq!(again.render(), report.render());
    }
});
