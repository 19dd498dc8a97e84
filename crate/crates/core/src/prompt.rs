//! Serializes a detection set into the generation prompt.
//!
//! Entries are `<label>: <probability>` in ascending class id, joined by
//! `", "`, followed by a space and the terminator (`TL;DR` by default).
//! Device and Background never appear, nor does any detection whose
//! probability does not exceed the threshold. With no entries the body is
//! `no abnormalities detected`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{AbnormalityClass, BBox, DetectionSet};

pub const DEFAULT_TERMINATOR: &str = "TL;DR";
pub const EMPTY_BODY: &str = "no abnormalities detected";
const PROMPT_FORMAT_VERSION: &str = "prompt-1";
const MAX_DECIMALS: u32 = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid prompt options: {0}")]
    InvalidOptions(String),
    #[error("training target is empty")]
    EmptyTarget,
    #[error("cannot parse prompt {text:?}: {detail}")]
    PromptParseError { text: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub probability_decimals: u32,
    pub include_bbox: bool,
    /// Entries need a probability strictly above this.
    pub threshold: f64,
    pub terminator: String,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            probability_decimals: 2,
            include_bbox: false,
            threshold: 0.0,
            terminator: DEFAULT_TERMINATOR.to_owned(),
        }
    }
}

/// Characters an entry list can contain. A terminator must contain at
/// least one character outside this set so it can never occur inside the
/// entry list.
fn entry_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, ' ' | '.' | ',' | ':' | '[' | ']')
}

impl PromptOptions {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.probability_decimals < 1 || self.probability_decimals > MAX_DECIMALS {
            return Err(PromptError::InvalidOptions(format!(
                "probability_decimals must be in 1..={MAX_DECIMALS}, got {}",
                self.probability_decimals
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(PromptError::InvalidOptions(format!(
                "threshold must be in [0, 1), got {}",
                self.threshold
            )));
        }
        if self.terminator.trim() != self.terminator || self.terminator.is_empty() {
            return Err(PromptError::InvalidOptions(
                "terminator must be non-empty without surrounding whitespace".into(),
            ));
        }
        if self.terminator.chars().all(entry_char) || self.terminator.contains('\n') {
            return Err(PromptError::InvalidOptions(format!(
                "terminator {:?} could occur inside the entry list",
                self.terminator
            )));
        }
        Ok(())
    }

    /// Compact identifier of the serialization settings, recorded next to
    /// every evaluation.
    pub fn version_tag(&self) -> String {
        format!(
            "{PROMPT_FORMAT_VERSION};decimals={};bbox={};threshold={};terminator={}",
            self.probability_decimals, self.include_bbox, self.threshold, self.terminator
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub study_id: String,
    pub text: String,
    pub options: PromptOptions,
}

/// Output record of the `prompt` stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub study_id: String,
    pub prompt: String,
}

impl From<&Prompt> for PromptRecord {
    fn from(p: &Prompt) -> Self {
        Self {
            study_id: p.study_id.clone(),
            prompt: p.text.clone(),
        }
    }
}

/// Whether a class may appear in a prompt at all.
pub fn promptable(class: AbnormalityClass) -> bool {
    class != AbnormalityClass::BACKGROUND && class != AbnormalityClass::DEVICE
}

fn render_entry(label: &str, probability: f64, bbox: Option<BBox>, opts: &PromptOptions) -> String {
    // `{:.N}` rounds the exact binary value half-to-even.
    let decimals = opts.probability_decimals as usize;
    let mut entry = format!("{label}: {probability:.decimals$}");
    if let (true, Some(b)) = (opts.include_bbox, bbox) {
        entry.push_str(&format!(" at [{:.2}, {:.2}, {:.2}, {:.2}]", b.x, b.y, b.w, b.h));
    }
    entry
}

/// Builds the prompt for a detection set. Options are assumed valid; see
/// [`PromptOptions::validate`].
pub fn build_prompt(set: &DetectionSet, opts: &PromptOptions) -> Prompt {
    let entries: Vec<String> = set
        .detections()
        .iter()
        .filter(|d| promptable(d.class) && d.probability > opts.threshold)
        .map(|d| render_entry(d.class.label(), d.probability, d.bbox, opts))
        .collect();
    let body = if entries.is_empty() {
        EMPTY_BODY.to_owned()
    } else {
        entries.join(", ")
    };
    Prompt {
        study_id: set.study_id.clone(),
        text: format!("{body} {}", opts.terminator),
        options: opts.clone(),
    }
}

/// Prompt, newline, target: the fine-tuning input layout.
pub fn render_training_pair(prompt: &Prompt, filtered_findings: &str) -> Result<String, PromptError> {
    let target = filtered_findings.trim();
    if target.is_empty() {
        return Err(PromptError::EmptyTarget);
    }
    Ok(format!("{}\n{target}", prompt.text))
}

/// Inverse of [`render_training_pair`]: splits at the first newline.
pub fn split_training_pair(pair: &str) -> Option<(&str, &str)> {
    pair.split_once('\n')
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub class: AbnormalityClass,
    pub probability: f64,
    pub bbox: Option<[f64; 4]>,
}

fn parse_decimal(s: &str) -> Option<(f64, usize)> {
    let int = s.bytes().take_while(u8::is_ascii_digit).count();
    if int == 0 || s.as_bytes().get(int) != Some(&b'.') {
        return None;
    }
    let frac = s[int + 1..].bytes().take_while(u8::is_ascii_digit).count();
    if frac == 0 {
        return None;
    }
    let len = int + 1 + frac;
    s[..len].parse().ok().map(|v| (v, len))
}

/// Parses the entry list of a prompt produced by [`build_prompt`].
pub fn parse_prompt(text: &str, terminator: &str) -> Result<Vec<PromptEntry>, PromptError> {
    let fail = |detail: &str| PromptError::PromptParseError {
        text: text.to_owned(),
        detail: detail.to_owned(),
    };
    let body = text
        .strip_suffix(terminator)
        .and_then(|b| b.strip_suffix(' '))
        .ok_or_else(|| fail("missing terminator"))?;
    if body == EMPTY_BODY {
        return Ok(Vec::new());
    }

    let mut entries: Vec<PromptEntry> = Vec::new();
    let mut rest = body;
    loop {
        let (label, after) = rest
            .split_once(": ")
            .ok_or_else(|| fail("expected `label: probability`"))?;
        let class = AbnormalityClass::from_label(label)
            .filter(|c| c.label() == label && promptable(*c))
            .ok_or_else(|| fail("unknown label"))?;
        let (probability, len) = parse_decimal(after).ok_or_else(|| fail("bad probability"))?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(fail("probability outside [0, 1]"));
        }
        rest = &after[len..];
        let mut bbox = None;
        if let Some(inner) = rest.strip_prefix(" at [") {
            let close = inner.find(']').ok_or_else(|| fail("unterminated bbox"))?;
            let coords: Vec<f64> = inner[..close]
                .split(", ")
                .map(|c| match parse_decimal(c) {
                    Some((v, n)) if n == c.len() => Ok(v),
                    _ => Err(fail("bad bbox coordinate")),
                })
                .collect::<Result<_, _>>()?;
            let coords: [f64; 4] = coords.try_into().map_err(|_| fail("bbox needs four coordinates"))?;
            bbox = Some(coords);
            rest = &inner[close + 1..];
        }
        if let Some(prev) = entries.last() {
            if prev.class >= class {
                return Err(fail("entries out of class order"));
            }
        }
        entries.push(PromptEntry {
            class,
            probability,
            bbox,
        });
        if rest.is_empty() {
            return Ok(entries);
        }
        rest = rest
            .strip_prefix(", ")
            .ok_or_else(|| fail("expected `, ` between entries"))?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{class_of, Detection};

    fn det(id: i64, p: f64) -> Detection {
        Detection {
            class: class_of(id).unwrap(),
            probability: p,
            bbox: None,
        }
    }

    fn text(dets: Vec<Detection>) -> String {
        build_prompt(&DetectionSet::new("s", dets), &PromptOptions::default()).text
    }

    #[test]
    fn device_and_zero_are_dropped() {
        assert_eq!(
            text(vec![det(1, 0.87), det(3, 0.95), det(7, 0.0)]),
            "lesion: 0.87 TL;DR"
        );
    }

    #[test]
    fn class_order() {
        assert_eq!(
            text(vec![det(7, 0.31), det(5, 0.66)]),
            "pleural effusion: 0.66, pneumothorax: 0.31 TL;DR"
        );
    }

    #[test]
    fn empty_set() {
        assert_eq!(text(vec![]), "no abnormalities detected TL;DR");
        assert_eq!(text(vec![det(3, 0.99)]), "no abnormalities detected TL;DR");
    }

    #[test]
    fn half_even_rounding_on_exact_ties() {
        // 0.125 and 0.375 are exact binary fractions.
        assert_eq!(text(vec![det(1, 0.125)]), "lesion: 0.12 TL;DR");
        assert_eq!(text(vec![det(1, 0.375)]), "lesion: 0.38 TL;DR");
        assert_eq!(text(vec![det(1, 1.0)]), "lesion: 1.00 TL;DR");
    }

    #[test]
    fn threshold_is_strict() {
        let opts = PromptOptions {
            threshold: 0.5,
            ..PromptOptions::default()
        };
        let set = DetectionSet::new("s", vec![det(1, 0.5), det(2, 0.51)]);
        assert_eq!(build_prompt(&set, &opts).text, "consolidation: 0.51 TL;DR");
    }

    #[test]
    fn bbox_rendering_and_parse() {
        let opts = PromptOptions {
            include_bbox: true,
            ..PromptOptions::default()
        };
        let mut d = det(5, 0.66);
        d.bbox = Some(BBox::new(0.1, 0.25, 0.3, 0.125).unwrap());
        let p = build_prompt(&DetectionSet::new("s", vec![d, det(7, 0.31)]), &opts);
        assert_eq!(
            p.text,
            "pleural effusion: 0.66 at [0.10, 0.25, 0.30, 0.12], pneumothorax: 0.31 TL;DR"
        );
        let entries = parse_prompt(&p.text, DEFAULT_TERMINATOR).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].bbox, Some([0.1, 0.25, 0.3, 0.12]));
        assert_eq!(entries[1].class.id(), 7);
    }

    #[test]
    fn training_pair() {
        let p = build_prompt(&DetectionSet::new("s", vec![det(1, 0.87)]), &PromptOptions::default());
        let pair = render_training_pair(&p, "There is a lesion.").unwrap();
        assert_eq!(pair, "lesion: 0.87 TL;DR\nThere is a lesion.");
        assert_eq!(
            split_training_pair(&pair),
            Some(("lesion: 0.87 TL;DR", "There is a lesion."))
        );
        assert_eq!(render_training_pair(&p, "  "), Err(PromptError::EmptyTarget));
    }

    #[test]
    fn option_validation() {
        assert!(PromptOptions::default().validate().is_ok());
        let bad = [
            PromptOptions {
                probability_decimals: 0,
                ..Default::default()
            },
            PromptOptions {
                threshold: 1.0,
                ..Default::default()
            },
            PromptOptions {
                threshold: -0.1,
                ..Default::default()
            },
            PromptOptions {
                terminator: String::new(),
                ..Default::default()
            },
            PromptOptions {
                terminator: "tldr".into(),
                ..Default::default()
            },
            PromptOptions {
                terminator: " TL;DR".into(),
                ..Default::default()
            },
        ];
        for opts in bad {
            assert!(opts.validate().is_err(), "{opts:?}");
        }
        assert!(PromptOptions {
            terminator: "<END>".into(),
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn parse_rejects_foreign_text() {
        for bad in [
            "lesion: 0.87",
            "lesion: 0.87 TLDR",
            "device: 0.50 TL;DR",
            "nodule: 0.50 TL;DR",
            "lesion: high TL;DR",
            "pneumothorax: 0.31, lesion: 0.87 TL;DR",
            "lesion: 0.87; fibrosis: 0.2 TL;DR",
            "Lesion: 0.87 TL;DR",
        ] {
            assert!(parse_prompt(bad, DEFAULT_TERMINATOR).is_err(), "{bad}");
        }
        assert!(parse_prompt("no abnormalities detected TL;DR", DEFAULT_TERMINATOR)
            .unwrap()
            .is_empty());
    }
}
