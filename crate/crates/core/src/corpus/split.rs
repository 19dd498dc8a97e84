//! Seeded train/validation/test assignment.
//!
//! Every study gets a rank key from a SHA-256 of the seed and its id.
//! Quotas are `floor(0.7 N)` train, `floor(0.1 N)` validation and the rest
//! test. Records that already carry a split keep it; unassigned records
//! fill the remaining quota in rank-key order, train first. A split whose
//! pinned records exceed its quota releases its highest-ranked members.

use sha2::{Digest, Sha256};

use super::{Split, StudyRecord};

/// Exact split sizes for a corpus of `n` records.
pub fn split_targets(n: usize) -> [usize; 3] {
    let train = n * 7 / 10;
    let validation = n / 10;
    [train, validation, n - train - validation]
}

/// Deterministic rank key of a study under `seed`.
pub fn split_key(study_id: &str, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"radfind-split\0");
    hasher.update(seed.to_le_bytes());
    hasher.update(study_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }
}

pub fn split_corpus(mut records: Vec<StudyRecord>, seed: u64) -> Vec<StudyRecord> {
    let targets = split_targets(records.len());

    let mut ranked: Vec<(u64, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (split_key(&r.study_id, seed), i))
        .collect();
    ranked.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| records[a.1].study_id.cmp(&records[b.1].study_id))
            .then_with(|| records[a.1].report_text.cmp(&records[b.1].report_text))
    });

    let mut counts = [0usize; 3];
    for r in &records {
        if let Some(s) = r.split {
            counts[slot(s)] += 1;
        }
    }
    // Release surplus pinned members, highest rank first.
    for &(_, i) in ranked.iter().rev() {
        if let Some(s) = records[i].split {
            if counts[slot(s)] > targets[slot(s)] {
                counts[slot(s)] -= 1;
                records[i].split = None;
            }
        }
    }

    let mut splits = Split::ALL.iter().copied();
    let mut current = splits.next();
    for &(_, i) in &ranked {
        if records[i].split.is_some() {
            continue;
        }
        while let Some(s) = current {
            if counts[slot(s)] < targets[slot(s)] {
                break;
            }
            current = splits.next();
        }
        let s = current.expect("quotas sum to the record count");
        counts[slot(s)] += 1;
        records[i].split = Some(s);
    }
    records
}
