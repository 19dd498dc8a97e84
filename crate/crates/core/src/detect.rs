//! Chest X-ray abnormality taxonomy, detector-output ingest and a seeded
//! mock detector.
//!
//! Detection files are line-delimited records
//! `{"study_id":..,"class_id":..,"probability":..,"bbox":[x,y,w,h]}`.
//! A row carrying only `study_id` declares a study with no detections, so
//! empty sets survive a write/ingest round trip.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::records::{self, Line};

/// Display labels, indexed by class id.
const DISPLAY_LABELS: [&str; 20] = [
    "Background",
    "Lesion",
    "Consolidation",
    "Device",
    "Atelectasis",
    "Pleural Effusion",
    "Fibrosis",
    "Pneumothorax (PTX)",
    "Calcification",
    "Fracture",
    "Hilar Enlargement",
    "Scoliosis",
    "Eventration",
    "Pneumoperitoneum",
    "Hernia",
    "Emphysema",
    "Aortic Dilatation",
    "Thickening",
    "Tracheal Deviation",
    "Subcutaneous Emphysema",
];

/// Prompt labels, indexed by class id.
const LABELS: [&str; 20] = [
    "background",
    "lesion",
    "consolidation",
    "device",
    "atelectasis",
    "pleural effusion",
    "fibrosis",
    "pneumothorax",
    "calcification",
    "fracture",
    "hilar enlargement",
    "scoliosis",
    "eventration",
    "pneumoperitoneum",
    "hernia",
    "emphysema",
    "aortic dilatation",
    "thickening",
    "tracheal deviation",
    "subcutaneous emphysema",
];

pub const NUM_CLASSES: usize = LABELS.len();

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("unknown abnormality class {id}{}", at_line(*.line))]
    UnknownClass { id: i64, line: Option<usize> },
    #[error("line {line}: malformed detection: {detail}")]
    MalformedDetection { line: usize, detail: String },
    #[error("line {line}: probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { line: usize, value: f64 },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

fn at_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AbnormalityClass(u8);

impl AbnormalityClass {
    pub const BACKGROUND: AbnormalityClass = AbnormalityClass(0);
    pub const DEVICE: AbnormalityClass = AbnormalityClass(3);

    pub fn all() -> impl Iterator<Item = AbnormalityClass> {
        (0..NUM_CLASSES as u8).map(AbnormalityClass)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Lowercase label used in prompts.
    pub fn label(self) -> &'static str {
        LABELS[self.0 as usize]
    }

    /// Label as printed in the taxonomy table.
    pub fn display_label(self) -> &'static str {
        DISPLAY_LABELS[self.0 as usize]
    }

    /// Looks a class up by prompt label or display label, ignoring case.
    pub fn from_label(label: &str) -> Option<AbnormalityClass> {
        let label = label.trim();
        (0..NUM_CLASSES)
            .find(|&i| LABELS[i].eq_ignore_ascii_case(label) || DISPLAY_LABELS[i].eq_ignore_ascii_case(label))
            .map(|i| AbnormalityClass(i as u8))
    }
}

impl fmt::Display for AbnormalityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn class_of(id: i64) -> Result<AbnormalityClass, DetectError> {
    if (0..NUM_CLASSES as i64).contains(&id) {
        Ok(AbnormalityClass(id as u8))
    } else {
        Err(DetectError::UnknownClass { id, line: None })
    }
}

pub fn label_of(class: AbnormalityClass) -> &'static str {
    class.label()
}

/// Normalized bounding box: top-left corner plus width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(x) && unit(y) && unit(w) && unit(h)) {
            return Err(format!("bbox [{x}, {y}, {w}, {h}] outside [0, 1]"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(format!("bbox [{x}, {y}, {w}, {h}] has non-positive size"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: AbnormalityClass,
    pub probability: f64,
    pub bbox: Option<BBox>,
}

/// Detections for one study: at most one per class, ascending class id,
/// never Background.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub study_id: String,
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(study_id: impl Into<String>) -> Self {
        Self {
            study_id: study_id.into(),
            detections: Vec::new(),
        }
    }

    /// Builds a set, dropping Background, collapsing duplicate classes to
    /// the highest probability, and sorting by class id. Probabilities must
    /// already be in range.
    pub fn new(study_id: impl Into<String>, detections: impl IntoIterator<Item = Detection>) -> Self {
        let mut set = Self::empty(study_id);
        for d in detections {
            set.insert(d);
        }
        set
    }

    fn insert(&mut self, detection: Detection) {
        if detection.class == AbnormalityClass::BACKGROUND {
            return;
        }
        match self.detections.binary_search_by_key(&detection.class, |d| d.class) {
            Ok(i) => {
                if detection.probability > self.detections[i].probability {
                    self.detections[i] = detection;
                }
            }
            Err(i) => self.detections.insert(i, detection),
        }
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

/// Accumulates detection rows into per-study sets, in first-seen study order.
#[derive(Debug, Default)]
pub struct DetectionIngest {
    order: Vec<String>,
    sets: HashMap<String, DetectionSet>,
}

impl DetectionIngest {
    pub fn push_line(&mut self, line: &Line) -> Result<(), DetectError> {
        let malformed = |detail: String| DetectError::MalformedDetection {
            line: line.number,
            detail,
        };
        let record: DetectionRecord = records::decode(line).map_err(malformed)?;
        if record.study_id.trim().is_empty() {
            return Err(malformed("empty study_id".into()));
        }
        let detection = match (record.class_id, record.probability) {
            (None, None) if record.bbox.is_none() => None,
            (Some(id), Some(p)) => {
                if id == 0 {
                    return Err(malformed("background is not a detection".into()));
                }
                let class = class_of(id).map_err(|_| DetectError::UnknownClass {
                    id,
                    line: Some(line.number),
                })?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(DetectError::ProbabilityOutOfRange {
                        line: line.number,
                        value: p,
                    });
                }
                let bbox = record
                    .bbox
                    .map(|[x, y, w, h]| BBox::new(x, y, w, h))
                    .transpose()
                    .map_err(malformed)?;
                Some(Detection {
                    class,
                    probability: p,
                    bbox,
                })
            }
            (None, _) => return Err(malformed("missing class_id".into())),
            (Some(_), None) => return Err(malformed("missing probability".into())),
        };
        let set = self.sets.entry(record.study_id.clone()).or_insert_with(|| {
            self.order.push(record.study_id.clone());
            DetectionSet::empty(record.study_id)
        });
        if let Some(d) = detection {
            set.insert(d);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<DetectionSet> {
        self.order
            .iter()
            .map(|id| self.sets.remove(id).expect("every ordered id has a set"))
            .collect()
    }
}

pub fn ingest_detections_from<R: Read>(reader: R) -> Result<Vec<DetectionSet>, DetectError> {
    let mut ingest = DetectionIngest::default();
    for line in records::lines(reader) {
        ingest.push_line(&line?)?;
    }
    Ok(ingest.finish())
}

pub fn ingest_detections(path: &Path) -> Result<Vec<DetectionSet>, DetectError> {
    ingest_detections_from(File::open(path)?)
}

/// Wire rows for a set; an empty set becomes a single `study_id`-only row.
pub fn detection_records(set: &DetectionSet) -> Vec<DetectionRecord> {
    if set.is_empty() {
        return vec![DetectionRecord {
            study_id: set.study_id.clone(),
            class_id: None,
            probability: None,
            bbox: None,
        }];
    }
    set.detections
        .iter()
        .map(|d| DetectionRecord {
            study_id: set.study_id.clone(),
            class_id: Some(i64::from(d.class.id())),
            probability: Some(d.probability),
            bbox: d.bbox.map(BBox::to_array),
        })
        .collect()
}

pub fn write_detections<W: Write>(writer: W, sets: &[DetectionSet]) -> io::Result<()> {
    let rows: Vec<DetectionRecord> = sets.iter().flat_map(detection_records).collect();
    records::write_records(writer, &rows)
}

const MOCK_MAX_DETECTIONS: u64 = 4;

/// Seeded stand-in for the image detector: a pure function of
/// `(study_id, seed)` emitting 0 to 4 detections.
pub fn mock_detect(study_id: &str, seed: u64) -> DetectionSet {
    let mut hasher = Sha256::new();
    hasher.update(b"radfind-mock\0");
    hasher.update(seed.to_le_bytes());
    hasher.update(study_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());

    let count = rng.next_u64() % (MOCK_MAX_DETECTIONS + 1);
    let mut set = DetectionSet::empty(study_id);
    for _ in 0..count {
        let class = AbnormalityClass(1 + (rng.next_u64() % (NUM_CLASSES as u64 - 1)) as u8);
        let probability = (rng.next_u64() % 101) as f64 / 100.0;
        let x = (rng.next_u64() % 80) as f64 / 100.0;
        let y = (rng.next_u64() % 80) as f64 / 100.0;
        let w = (1 + rng.next_u64() % 20) as f64 / 100.0;
        let h = (1 + rng.next_u64() % 20) as f64 / 100.0;
        set.insert(Detection {
            class,
            probability,
            bbox: Some(BBox { x, y, w, h }),
        });
    }
    set
}
