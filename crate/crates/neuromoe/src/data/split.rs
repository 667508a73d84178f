//! Stratified train/test splitting.
//!
//! Each class is shuffled and cut at the same fraction, so small classes
//! cannot vanish from either side. The cut point rounds to nearest and is
//! clamped so both sides keep at least one subject per class.

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::{ClassLabel, SubjectRecord};
use crate::rng;
use crate::{Error, Result};

/// Stratified index split. Returned index lists are ascending; shuffling only
/// decides membership. Deterministic for a given seed.
pub fn split_indices(
    labels: &[ClassLabel],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Data(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut per_class: [Vec<usize>; 3] = Default::default();
    for (i, label) in labels.iter().enumerate() {
        per_class[label.index()].push(i);
    }
    for (class, members) in ClassLabel::ALL.iter().zip(&per_class) {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {} has {} record(s); a stratified split needs at least 2 per class",
                class.name(),
                members.len()
            )));
        }
    }
    let mut rng = rng::stream(seed, "split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in &mut per_class {
        members.shuffle(&mut rng);
        let n = members.len();
        // Round-to-nearest cut, clamped so neither side is empty.
        let cut = ((n as f64 * train_fraction + 0.5).floor() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Split a cohort into train and test record lists, preserving input order
/// within each side.
pub fn split_cohort(
    records: Vec<SubjectRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    let labels: Vec<ClassLabel> = records.iter().map(|r| r.label).collect();
    let (train_idx, test_idx) = split_indices(&labels, train_fraction, seed)?;
    let mut train_mark = vec![false; records.len()];
    for &i in &train_idx {
        train_mark[i] = true;
    }
    let mut train = Vec::with_capacity(train_idx.len());
    let mut test = Vec::with_capacity(test_idx.len());
    for (record, is_train) in records.into_iter().zip(train_mark) {
        if is_train {
            train.push(record);
        } else {
            test.push(record);
        }
    }
    Ok((train, test))
}

/// Digest of a concrete split, for confirming that runs shared one. Covers
/// both membership and side assignment of every subject id.
pub fn split_hash(train: &[SubjectRecord], test: &[SubjectRecord]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"train");
    for r in train {
        hasher.update([0u8]);
        hasher.update(r.id.as_bytes());
    }
    hasher.update(b"test");
    for r in test {
        hasher.update([0u8]);
        hasher.update(r.id.as_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ── Tests ──
