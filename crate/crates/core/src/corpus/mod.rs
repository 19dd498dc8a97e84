//! Study records, radiology report parsing and dataset splitting.

mod report;
mod sentence;
mod split;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{self, Line};

pub use report::{
    parse_report, parse_report_with, ParsedReportRecord, RadiologyReport, ReportError, Section, SectionName,
};
pub use sentence::{segment_sentences, Abbreviation, SentenceSplitter};
pub use split::{split_corpus, split_key, split_targets};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("line {line}: duplicate study_id {study_id:?}")]
    DuplicateStudy { line: usize, study_id: String },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One study: an opaque identifier and its free-text report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub report_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl StudyRecord {
    pub fn new(study_id: impl Into<String>, report_text: impl Into<String>) -> Self {
        Self {
            study_id: study_id.into(),
            report_text: report_text.into(),
            split: None,
        }
    }
}

/// Decodes a single corpus line, enforcing the per-record invariants.
pub fn decode_record(line: &Line) -> Result<StudyRecord, CorpusError> {
    let malformed = |detail: String| CorpusError::MalformedRecord {
        line: line.number,
        detail,
    };
    let record: StudyRecord = records::decode(line).map_err(malformed)?;
    if record.study_id.trim().is_empty() {
        return Err(malformed("empty study_id".into()));
    }
    if record.report_text.trim().is_empty() {
        return Err(malformed("empty report_text".into()));
    }
    Ok(record)
}

/// Streams corpus records, yielding one result per non-blank line.
///
/// Duplicate study ids are reported on the second occurrence.
pub fn corpus_records<R: Read>(reader: R) -> impl Iterator<Item = Result<StudyRecord, CorpusError>> {
    let mut seen = HashSet::new();
    records::lines(reader).map(move |line| {
        let line = line?;
        let record = decode_record(&line)?;
        if !seen.insert(record.study_id.clone()) {
            return Err(CorpusError::DuplicateStudy {
                line: line.number,
                study_id: record.study_id,
            });
        }
        Ok(record)
    })
}

pub fn read_corpus_from<R: Read>(reader: R) -> Result<Vec<StudyRecord>, CorpusError> {
    corpus_records(reader).collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<StudyRecord>, CorpusError> {
    read_corpus_from(File::open(path)?)
}

pub fn write_corpus_to<W: Write>(writer: W, records: &[StudyRecord]) -> Result<(), CorpusError> {
    Ok(records::write_records(writer, records)?)
}

pub fn write_corpus(records: &[StudyRecord], path: &Path) -> Result<(), CorpusError> {
    write_corpus_to(File::create(path)?, records)
}
