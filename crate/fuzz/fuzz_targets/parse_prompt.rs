#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::prompt::{parse_prompt, DEFAULT_TERMINATOR};

fuzz_target!(|text: &str| {
    if let Ok(entries) = parse_prompt(text, DEFAULT_TERMINATOR) {
        assert!(entries.windows(2).all(|w| w[0].class < w[1].class));
        assert!(entries.iter().all(|e| (0.0..=1.0).contains(&e.probability)));
    }
});
