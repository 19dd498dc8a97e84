use crate::prompt::{parse_prompt, DEFAULT_TERMINATOR};

use super::{GenerateError, GenerationBackend, GenerationRequest};

pub const CLEAR_SENTENCE: &str = "The lungs are clear.";

/// One hedged sentence per entry, in order. Probability bands:
/// `>= 0.75` asserts, `[0.5, 0.75)` says "likely", below 0.5 says "may be".
pub fn template_generate<S: AsRef<str>>(entries: &[(S, f64)]) -> String {
    if entries.is_empty() {
        return CLEAR_SENTENCE.to_owned();
    }
    entries
        .iter()
        .map(|(label, p)| {
            let label = label.as_ref();
            if *p >= 0.75 {
                format!("There is a {label}.")
            } else if *p >= 0.5 {
                format!("There is likely a {label}.")
            } else {
                format!("There may be a {label}.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic desk-scale backend that reads the prompt's entry list.
#[derive(Debug, Clone)]
pub struct TemplateBackend {
    terminator: String,
}

impl Default for TemplateBackend {
    fn default() -> Self {
        Self::new(DEFAULT_TERMINATOR)
    }
}

impl TemplateBackend {
    pub fn new(terminator: &str) -> Self {
        Self {
            terminator: terminator.to_owned(),
        }
    }
}

impl GenerationBackend for TemplateBackend {
    fn name(&self) -> &str {
        "template"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, GenerateError> {
        let entries: Vec<(&str, f64)> = parse_prompt(&request.prompt, &self.terminator)?
            .into_iter()
            .map(|e| (e.class.label(), e.probability))
            .collect();
        Ok(template_generate(&entries))
    }
}
