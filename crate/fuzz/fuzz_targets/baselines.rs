#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::rouge::{parse_baselines, render_comparison};

fuzz_target!(|text: &str| {
    if let Ok(rows) = parse_baselines(text) {
        let table = render_comparison(&rows);
        assert_eq!(table.lines().count(), rows.len() + 2);
    }
});
