//! Section parser for free-text radiology reports.
//!
//! A header is one of the known keywords followed by optional blanks and a
//! colon. Headers are recognized at the start of a line (after optional
//! blanks) and also mid-line directly after a sentence terminator, so that
//! single-line reports such as `FINDINGS: ... IMPRESSION: ...` split. An
//! all-caps `WORD:` at line start that is not a known keyword opens an
//! `Other` section whose text keeps that header.
//!
//! Each section name appears at most once. A header naming a section that
//! already exists is not a boundary; its text stays in the current section.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::sentence::SentenceSplitter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("report {0:?} is empty")]
    EmptyReport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionName {
    Indication,
    Technique,
    Comparison,
    Findings,
    Impression,
    Other,
}

const KEYWORDS: [(&str, SectionName); 6] = [
    ("INDICATION", SectionName::Indication),
    ("HISTORY", SectionName::Indication),
    ("TECHNIQUE", SectionName::Technique),
    ("COMPARISON", SectionName::Comparison),
    ("FINDINGS", SectionName::Findings),
    ("IMPRESSION", SectionName::Impression),
];

const UNKNOWN_HEADER_MAX: usize = 40;

impl SectionName {
    /// Maps a header keyword (any case) to its section; unknown keywords map to `Other`.
    pub fn from_keyword(keyword: &str) -> SectionName {
        let keyword = keyword.trim();
        KEYWORDS
            .iter()
            .find(|(kw, _)| kw.eq_ignore_ascii_case(keyword))
            .map_or(SectionName::Other, |&(_, name)| name)
    }

    /// Canonical header keyword used when rendering; `None` for `Other`.
    pub fn keyword(self) -> Option<&'static str> {
        match self {
            SectionName::Indication => Some("INDICATION"),
            SectionName::Technique => Some("TECHNIQUE"),
            SectionName::Comparison => Some("COMPARISON"),
            SectionName::Findings => Some("FINDINGS"),
            SectionName::Impression => Some("IMPRESSION"),
            SectionName::Other => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SectionName::Indication => "indication",
            SectionName::Technique => "technique",
            SectionName::Comparison => "comparison",
            SectionName::Findings => "findings",
            SectionName::Impression => "impression",
            SectionName::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: SectionName,
    /// Trimmed section body; always `raw[span]`.
    pub text: String,
    pub span: Range<usize>,
    /// Byte range of the recognized `KEYWORD:` header, if any.
    pub header: Option<Range<usize>>,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadiologyReport {
    pub study_id: String,
    pub raw: String,
    sections: Vec<Section>,
}

impl RadiologyReport {
    /// Sections in order of appearance in the raw text.
    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, name: SectionName) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn text(&self, name: SectionName) -> Option<&str> {
        self.section(name).map(|s| s.text.as_str())
    }

    pub fn findings(&self) -> Option<&Section> {
        self.section(SectionName::Findings)
    }

    /// Section name to text, keyed in canonical order.
    pub fn section_map(&self) -> BTreeMap<SectionName, &str> {
        self.sections.iter().map(|s| (s.name, s.text.as_str())).collect()
    }

    /// Re-serializes the report as `KEYWORD: text` blocks in appearance order.
    /// Parsing the output yields the same sections.
    pub fn render(&self) -> String {
        let blocks: Vec<String> = self
            .sections
            .iter()
            .map(|s| match s.name.keyword() {
                None => s.text.clone(),
                Some(kw) if s.text.is_empty() => format!("{kw}:"),
                Some(kw) => format!("{kw}: {}", s.text),
            })
            .collect();
        blocks.join("\n\n")
    }

    pub fn to_record(&self) -> ParsedReportRecord {
        ParsedReportRecord {
            study_id: self.study_id.clone(),
            sections: self.sections.iter().map(|s| (s.name, s.text.clone())).collect(),
            sentences: self.sections.iter().map(|s| (s.name, s.sentences.clone())).collect(),
        }
    }
}

/// Output record of the `parse` stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReportRecord {
    pub study_id: String,
    pub sections: BTreeMap<SectionName, String>,
    pub sentences: BTreeMap<SectionName, Vec<String>>,
}

#[derive(Debug, Clone, Copy)]
struct HeaderHit {
    start: usize,
    content_start: usize,
    name: SectionName,
    known: bool,
}

/// Matches `KEYWORD[ \t]*:` at the start of `s`, returning the section and
/// the byte length through the colon.
fn match_keyword(s: &str) -> Option<(SectionName, usize)> {
    let bytes = s.as_bytes();
    for &(kw, name) in &KEYWORDS {
        let n = kw.len();
        if bytes.len() > n && bytes[..n].eq_ignore_ascii_case(kw.as_bytes()) {
            let rest = &s[n..];
            let after = rest.trim_start_matches([' ', '\t']);
            if after.starts_with(':') {
                return Some((name, n + (rest.len() - after.len()) + 1));
            }
        }
    }
    None
}

/// Matches an all-caps `LABEL:` of bounded length at the start of `s`.
fn match_unknown_header(s: &str) -> bool {
    let mut chars = s.char_indices();
    match chars.next() {
        Some((_, c)) if c.is_ascii_uppercase() => {}
        _ => return false,
    }
    for (idx, c) in chars {
        if idx > UNKNOWN_HEADER_MAX {
            return false;
        }
        match c {
            ':' => return true,
            'A'..='Z' | '0'..='9' | ' ' | '/' | '&' | '(' | ')' | '-' => {}
            _ => return false,
        }
    }
    false
}

fn find_headers(raw: &str) -> Vec<HeaderHit> {
    let mut hits = Vec::new();
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let body = line.trim_start();
        let lead = offset + (line.len() - body.len());
        if let Some((name, len)) = match_keyword(body) {
            hits.push(HeaderHit {
                start: lead,
                content_start: lead + len,
                name,
                known: true,
            });
        } else if match_unknown_header(body) {
            hits.push(HeaderHit {
                start: lead,
                content_start: lead,
                name: SectionName::Other,
                known: false,
            });
        }

        let bytes = line.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if matches!(bytes[i], b'.' | b'!' | b'?') {
                let mut j = i + 1;
                while j < bytes.len() && matches!(bytes[j], b' ' | b'\t') {
                    j += 1;
                }
                if j > i + 1 {
                    if let Some((name, len)) = match_keyword(&line[j..]) {
                        hits.push(HeaderHit {
                            start: offset + j,
                            content_start: offset + j + len,
                            name,
                            known: true,
                        });
                        i = j + len;
                        continue;
                    }
                }
            }
            i += 1;
        }
        offset += line.len();
    }
    hits
}

fn trimmed_span(raw: &str, range: Range<usize>) -> Range<usize> {
    let slice = &raw[range.clone()];
    let start = range.start + (slice.len() - slice.trim_start().len());
    let end = range.end - (slice.len() - slice.trim_end().len());
    if start >= end {
        start..start
    } else {
        start..end
    }
}

pub fn parse_report(study_id: &str, raw: &str) -> Result<RadiologyReport, ReportError> {
    thread_local! {
        static SPLITTER: SentenceSplitter = SentenceSplitter::default();
    }
    SPLITTER.with(|splitter| parse_report_with(study_id, raw, splitter))
}

pub fn parse_report_with(
    study_id: &str,
    raw: &str,
    splitter: &SentenceSplitter,
) -> Result<RadiologyReport, ReportError> {
    if raw.trim().is_empty() {
        return Err(ReportError::EmptyReport(study_id.to_owned()));
    }

    struct Open {
        name: SectionName,
        header: Option<Range<usize>>,
        content_start: usize,
    }

    let hits = find_headers(raw);
    let mut populated = [false; 6];
    let mut sections = Vec::new();
    let mut close = |open: Open, end: usize| {
        let span = trimmed_span(raw, open.content_start..end);
        let text = &raw[span.clone()];
        sections.push(Section {
            name: open.name,
            text: text.to_owned(),
            span,
            header: open.header,
            sentences: splitter.split(text).into_iter().map(str::to_owned).collect(),
        });
    };

    let preamble_end = hits.first().map_or(raw.len(), |h| h.start);
    let mut current = None;
    if !raw[..preamble_end].trim().is_empty() {
        populated[SectionName::Other.index()] = true;
        current = Some(Open {
            name: SectionName::Other,
            header: None,
            content_start: 0,
        });
    }
    for hit in hits {
        if populated[hit.name.index()] {
            continue;
        }
        populated[hit.name.index()] = true;
        if let Some(open) = current.take() {
            close(open, hit.start);
        }
        current = Some(Open {
            name: hit.name,
            header: hit.known.then_some(hit.start..hit.content_start),
            content_start: hit.content_start,
        });
    }
    if let Some(open) = current {
        close(open, raw.len());
    }

    Ok(RadiologyReport {
        study_id: study_id.to_owned(),
        raw: raw.to_owned(),
        sections,
    })
}
