#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::pipeline::{PipelineConfig, RawConfig};

fuzz_target!(|text: &str| {
    if let Ok(raw) = RawConfig::parse(text) {
        let _ = PipelineConfig::from_raw(raw);
    }
});
