#![no_main]

use libfuzzer_sys::fuzz_target;
use radfind::filter::{filter_findings, FilterRuleSet};

fuzz_target!(|text: &str| {
    if let Ok(rules) = FilterRuleSet::from_text(text) {
        let outcome = filter_findings(&["No pleural effusion.", "There is a small lesion."], &rules);
        assert_eq!(outcome.decisions.len(), 2);
    }
});
