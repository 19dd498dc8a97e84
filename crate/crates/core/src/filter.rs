//! Regex filter that strips negated and device sentences from ground-truth
//! Findings.
//!
//! Rules files hold one regex per line. `#` starts a comment line,
//! `[negation]` and `[device]` switch the category of the following
//! patterns (patterns before any section header are negation rules).
//! All patterns are compiled case-insensitively into one `RegexSet`; the
//! lowest-numbered matching rule is reported.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use regex::{RegexSet, RegexSetBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const DEFAULT_RULES: &str = include_str!("../data/default_rules.txt");
pub const DEFAULT_RULES_VERSION: &str = "default-1";

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("line {line}: invalid rule {pattern:?}: {detail}")]
    InvalidRule {
        line: usize,
        pattern: String,
        detail: String,
    },
    #[error("line {line}: unknown rule section {section:?}")]
    UnknownSection { line: usize, section: String },
    #[error("rule set has no patterns")]
    EmptyRuleSet,
    #[error("reading rules: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Negation,
    Device,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::Negation => "negation",
            RuleKind::Device => "device",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub kind: RuleKind,
    pub pattern: String,
    /// Position within its kind, e.g. `device:2`.
    pub index: usize,
}

impl Rule {
    pub fn id(&self) -> String {
        format!("{}:{}", self.kind, self.index)
    }
}

#[derive(Debug, Clone)]
pub struct FilterRuleSet {
    rules: Vec<Rule>,
    set: RegexSet,
    version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub sentence: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_rule: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    /// Kept sentences joined by single spaces.
    pub text: String,
    pub decisions: Vec<FilterDecision>,
}

/// Output record of the `filter` stage: the filtered reference plus an
/// audit trail of per-sentence decisions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredFindingsRecord {
    pub study_id: String,
    pub text: String,
    pub rule_set_version: String,
    pub decisions: Vec<FilterDecision>,
}

fn compile(patterns: &[(usize, &Rule)]) -> Result<RegexSet, FilterError> {
    RegexSetBuilder::new(patterns.iter().map(|(_, r)| r.pattern.as_str()))
        .case_insensitive(true)
        .build()
        .map_err(|e| {
            // Find the offending pattern by compiling each in turn.
            for (line, rule) in patterns {
                if let Err(err) = regex::RegexBuilder::new(&rule.pattern).build() {
                    return FilterError::InvalidRule {
                        line: *line,
                        pattern: rule.pattern.clone(),
                        detail: err.to_string(),
                    };
                }
            }
            FilterError::InvalidRule {
                line: 0,
                pattern: String::new(),
                detail: e.to_string(),
            }
        })
}

impl FilterRuleSet {
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES, DEFAULT_RULES_VERSION).expect("bundled rules compile")
    }

    /// Parses rules text. The version of file-loaded rule sets is derived
    /// from a digest of the text, so changed rules give a changed version.
    pub fn from_text(text: &str) -> Result<Self, FilterError> {
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Self::parse(text, &format!("file-{hex}"))
    }

    fn parse(text: &str, version: &str) -> Result<Self, FilterError> {
        let mut kind = RuleKind::Negation;
        let mut counts = [0usize; 2];
        let mut entries: Vec<(usize, Rule)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(section) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                kind = match section.trim().to_ascii_lowercase().as_str() {
                    "negation" => RuleKind::Negation,
                    "device" => RuleKind::Device,
                    _ => {
                        return Err(FilterError::UnknownSection {
                            line: line_no,
                            section: section.to_owned(),
                        })
                    }
                };
                continue;
            }
            let slot = kind as usize;
            entries.push((
                line_no,
                Rule {
                    kind,
                    pattern: line.to_owned(),
                    index: counts[slot],
                },
            ));
            counts[slot] += 1;
        }
        if entries.is_empty() {
            return Err(FilterError::EmptyRuleSet);
        }
        let refs: Vec<(usize, &Rule)> = entries.iter().map(|(l, r)| (*l, r)).collect();
        let set = compile(&refs)?;
        Ok(Self {
            rules: entries.into_iter().map(|(_, r)| r).collect(),
            set,
            version: version.to_owned(),
        })
    }

    /// Returns a rule set extended by one pattern. The version gains a `+N` suffix.
    pub fn with_pattern(&self, kind: RuleKind, pattern: &str) -> Result<Self, FilterError> {
        let mut rules = self.rules.clone();
        let index = rules.iter().filter(|r| r.kind == kind).count();
        rules.push(Rule {
            kind,
            pattern: pattern.to_owned(),
            index,
        });
        let refs: Vec<(usize, &Rule)> = rules.iter().map(|r| (0, r)).collect();
        let set = compile(&refs)?;
        Ok(Self {
            set,
            version: format!("{}+{}", self.version, rules.len()),
            rules,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// The first rule matching the sentence, if any.
    pub fn first_match(&self, sentence: &str) -> Option<&Rule> {
        self.set.matches(sentence).iter().next().map(|i| &self.rules[i])
    }
}

/// Loads rules from a file, or the built-in defaults when `path` is `None`.
/// A file replaces the defaults entirely.
pub fn load_rules(path: Option<&Path>) -> Result<FilterRuleSet, FilterError> {
    match path {
        None => Ok(FilterRuleSet::builtin()),
        Some(p) => FilterRuleSet::from_text(&fs::read_to_string(p)?),
    }
}

pub fn filter_findings<S: AsRef<str>>(sentences: &[S], rules: &FilterRuleSet) -> FilterOutcome {
    let mut kept = Vec::new();
    let decisions = sentences
        .iter()
        .map(|s| {
            let sentence = s.as_ref();
            let matched = rules.first_match(sentence).map(Rule::id);
            if matched.is_none() {
                kept.push(sentence);
            }
            FilterDecision {
                sentence: sentence.to_owned(),
                kept: matched.is_none(),
                matched_rule: matched,
            }
        })
        .collect();
    FilterOutcome {
        text: kept.join(" "),
        decisions,
    }
}
