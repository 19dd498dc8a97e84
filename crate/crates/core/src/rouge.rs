//! Sentence-level ROUGE-L over whitespace tokens, corpus aggregation and
//! the comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Published ROUGE-L scores of comparison systems, bundled as a TSV.
pub const BUNDLED_BASELINES: &str = include_str!("../data/baselines.tsv");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate study {0:?}")]
    DuplicateStudy(String),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("baselines line {line}: {detail}")]
    MalformedBaseline { line: usize, detail: String },
    #[error("reading baselines: {0}")]
    Io(#[from] io::Error),
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
        )
}

/// Lowercases, splits on whitespace and strips edge punctuation.
pub fn tokenize_for_rouge(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(is_punct).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Longest common subsequence length in O(|a|·|b|) time and
/// O(min(|a|, |b|)) space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub lcs_len: usize,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl RougeScore {
    pub fn from_counts(lcs_len: usize, hyp_len: usize, ref_len: usize, beta: f64) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(lcs_len, hyp_len);
        let recall = ratio(lcs_len, ref_len);
        let b2 = beta * beta;
        let f = if precision == 0.0 && recall == 0.0 {
            0.0
        } else {
            (1.0 + b2) * precision * recall / (recall + b2 * precision)
        };
        Self {
            precision,
            recall,
            f,
            lcs_len,
            hyp_len,
            ref_len,
        }
    }
}

pub fn rouge_l_tokens(hyp: &[String], reference: &[String], beta: f64) -> RougeScore {
    RougeScore::from_counts(lcs_length(hyp, reference), hyp.len(), reference.len(), beta)
}

/// ROUGE-L of a hypothesis against a reference. `beta` must be positive.
pub fn rouge_l(hyp: &str, reference: &str, beta: f64) -> RougeScore {
    rouge_l_tokens(&tokenize_for_rouge(hyp), &tokenize_for_rouge(reference), beta)
}

fn check_beta(beta: f64) -> Result<(), EvalError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(EvalError::InvalidBeta(beta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub mean_f: f64,
    pub n: usize,
    pub per_study: BTreeMap<String, RougeScore>,
    /// Studies whose reference tokenized to nothing; excluded from the mean.
    pub empty_references: Vec<String>,
    pub rule_set_version: String,
    pub prompt_options_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub study_id: String,
    pub hypothesis: String,
    pub reference: String,
}

impl EvalPair {
    pub fn new(study_id: impl Into<String>, hypothesis: impl Into<String>, reference: impl Into<String>) -> Self {
        Self {
            study_id: study_id.into(),
            hypothesis: hypothesis.into(),
            reference: reference.into(),
        }
    }
}

/// Per-study output record of the `evaluate` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub study_id: String,
    #[serde(flatten)]
    pub score: RougeScore,
}

pub fn evaluate_corpus(
    pairs: &[EvalPair],
    beta: f64,
    rule_set_version: &str,
    prompt_options_version: &str,
) -> Result<CorpusScore, EvalError> {
    check_beta(beta)?;
    let mut per_study = BTreeMap::new();
    let mut empty_references = Vec::new();
    for pair in pairs {
        if per_study.contains_key(&pair.study_id) || empty_references.contains(&pair.study_id) {
            return Err(EvalError::DuplicateStudy(pair.study_id.clone()));
        }
        let reference = tokenize_for_rouge(&pair.reference);
        if reference.is_empty() {
            empty_references.push(pair.study_id.clone());
            continue;
        }
        let score = rouge_l_tokens(&tokenize_for_rouge(&pair.hypothesis), &reference, beta);
        per_study.insert(pair.study_id.clone(), score);
    }
    empty_references.sort();
    // Summed in study-id order so the mean is bitwise independent of input order.
    let n = per_study.len();
    let mean_f = if n == 0 {
        0.0
    } else {
        per_study.values().map(|s| s.f).sum::<f64>() / n as f64
    };
    Ok(CorpusScore {
        mean_f,
        n,
        per_study,
        empty_references,
        rule_set_version: rule_set_version.to_owned(),
        prompt_options_version: prompt_options_version.to_owned(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub system: String,
    pub rouge_l: f64,
}

impl ComparisonRow {
    pub fn new(system: impl Into<String>, rouge_l: f64) -> Self {
        Self {
            system: system.into(),
            rouge_l,
        }
    }
}

/// Parses `system<TAB>score` lines; `#` comments and blank lines are skipped.
pub fn parse_baselines(text: &str) -> Result<Vec<ComparisonRow>, EvalError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |detail: String| EvalError::MalformedBaseline { line: line_no, detail };
        let (name, score) = trimmed
            .rsplit_once('\t')
            .ok_or_else(|| malformed("expected `system<TAB>score`".into()))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(malformed("empty system name".into()));
        }
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|e| malformed(format!("bad score {score:?}: {e}")))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(malformed(format!("score {score} outside [0, 1]")));
        }
        rows.push(ComparisonRow::new(name, score));
    }
    Ok(rows)
}

pub fn load_baselines(path: &Path) -> Result<Vec<ComparisonRow>, EvalError> {
    parse_baselines(&fs::read_to_string(path)?)
}

/// Fixed-width table sorted by ascending score (ties by name); the last
/// row is the best and carries a `*` marker.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut rows: Vec<&ComparisonRow> = rows.iter().collect();
    rows.sort_by(|a, b| a.rouge_l.total_cmp(&b.rouge_l).then_with(|| a.system.cmp(&b.system)));
    let width = rows
        .iter()
        .map(|r| r.system.chars().count())
        .chain(std::iter::once("System".len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}", "System", "ROUGE-L");
    let _ = writeln!(out, "{}", "-".repeat(width + 9));
    let last = rows.len().saturating_sub(1);
    for (i, r) in rows.iter().enumerate() {
        let mark = if i == last { " *" } else { "" };
        let _ = writeln!(out, "{:<width$}  {:>7.3}{mark}", r.system, r.rouge_l);
    }
    out
}
