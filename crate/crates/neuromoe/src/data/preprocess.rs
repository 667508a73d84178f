//! Tabular preprocessing and volume intensity normalization.
//!
//! Statistics are fitted on the training split only and then applied
//! unchanged to any record: mean imputation for missing values, z-scoring
//! for continuous features, one-hot encoding for the categorical PSG result.
//! Volumes are z-scored per subject and per modality over all voxels (and
//! frames), so they need no fitted statistics at all.

use super::{ClassLabel, SubjectRecord, CLINICAL_NAMES, PSG_INDEX, SERUM_NAMES};
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Below this, a fitted SD is treated as 1 (normalized values collapse to 0).
const SD_GUARD: f64 = 1e-8;

/// Clinical-vector slots holding continuous features, in record order.
const CONTINUOUS_CLINICAL: [usize; 6] = [0, 2, 3, 4, 5, 6];

/// Fitted mean/SD for one continuous feature. `sd` is stored post-guard:
/// it is what division uses, never below [`SD_GUARD`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureStats {
    pub mean: f64,
    pub sd: f64,
}

/// Frozen training-split statistics. Fitting and applying are separate so
/// test records can never influence the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessStats {
    /// Continuous clinical features, ordered duration, UPDRS-III, TUG,
    /// H&Y, MoCA, UPSIT.
    pub clinical: [FeatureStats; 6],
    /// Distinct PSG values observed in training, ascending. One-hot width.
    pub psg_categories: Vec<f64>,
    /// Imputation value for a missing PSG result: the most frequent training
    /// category, ties resolved toward the lower value.
    pub psg_mode: f64,
    pub serum: [FeatureStats; 3],
    /// Degenerate-feature notices accumulated during fitting; the library
    /// never prints them itself.
    pub warnings: Vec<String>,
}

impl PreprocessStats {
    /// Length of the produced feature vector: six continuous clinical values,
    /// the PSG one-hot block, three serum values.
    pub fn feature_dim(&self) -> usize {
        CONTINUOUS_CLINICAL.len() + self.psg_categories.len() + SERUM_NAMES.len()
    }
}

/// A record after preprocessing: volumes z-scored, tabular features imputed,
/// normalized, and one-hot encoded into a single flat vector.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub id: String,
    pub label: ClassLabel,
    pub amri: Tensor,
    pub dti: Tensor,
    pub fmri: Tensor,
    pub features: Vec<f64>,
}

fn fit_feature(name: &str, observed: &[f64], warnings: &mut Vec<String>) -> Result<FeatureStats> {
    if observed.is_empty() {
        return Err(Error::Data(format!(
            "feature '{name}' is missing in every training subject; cannot fit statistics"
        )));
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < SD_GUARD {
        warnings.push(format!(
            "feature '{name}' is constant on the training split (SD {sd:.3e}); \
             treating SD as 1, normalized values will be 0"
        ));
        Ok(FeatureStats { mean, sd: 1.0 })
    } else {
        Ok(FeatureStats { mean, sd })
    }
}

/// Fit imputation and normalization statistics on the training split.
///
/// Errors if the split is empty or any tabular feature is missing in every
/// training subject.
pub fn fit_preprocess(train: &[SubjectRecord]) -> Result<PreprocessStats> {
    if train.is_empty() {
        return Err(Error::Data(
            "cannot fit preprocessing statistics on an empty training split".into(),
        ));
    }
    let mut warnings = Vec::new();

    let mut clinical = [FeatureStats { mean: 0.0, sd: 1.0 }; 6];
    for (out, &slot) in clinical.iter_mut().zip(&CONTINUOUS_CLINICAL) {
        let observed: Vec<f64> = train
            .iter()
            .map(|r| r.clinical[slot])
            .filter(|v| !v.is_nan())
            .collect();
        *out = fit_feature(CLINICAL_NAMES[slot], &observed, &mut warnings)?;
    }

    let psg_observed: Vec<f64> = train
        .iter()
        .map(|r| r.clinical[PSG_INDEX])
        .filter(|v| !v.is_nan())
        .collect();
    if psg_observed.is_empty() {
        return Err(Error::Data(format!(
            "feature '{}' is missing in every training subject; cannot fit statistics",
            CLINICAL_NAMES[PSG_INDEX]
        )));
    }
    let mut psg_categories = psg_observed.clone();
    psg_categories.sort_by(|a, b| a.partial_cmp(b).expect("PSG values are finite"));
    psg_categories.dedup();
    let psg_mode = psg_categories
        .iter()
        .map(|&c| (c, psg_observed.iter().filter(|&&v| v == c).count()))
        // Ascending category order plus a strict comparison keeps the lower
        // category on ties.
        .fold((f64::NAN, 0usize), |best, (c, n)| if n > best.1 { (c, n) } else { best })
        .0;

    let mut serum = [FeatureStats { mean: 0.0, sd: 1.0 }; 3];
    for (i, out) in serum.iter_mut().enumerate() {
        let observed: Vec<f64> = train
            .iter()
            .map(|r| r.serum[i])
            .filter(|v| !v.is_nan())
            .collect();
        *out = fit_feature(SERUM_NAMES[i], &observed, &mut warnings)?;
    }

    Ok(PreprocessStats {
        clinical,
        psg_categories,
        psg_mode,
        serum,
        warnings,
    })
}

/// Z-score a whole volume over all voxels and frames. A constant volume hits
/// the SD guard and normalizes to zeros rather than dividing by zero.
fn zscore_volume(volume: &Tensor, id: &str, modality: &str) -> Result<Tensor> {
    let data = volume.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "subject {id}: {modality} volume contains non-finite values"
        )));
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd < SD_GUARD { 1.0 } else { sd };
    let normalized: Vec<f64> = data.iter().map(|v| (v - mean) / scale).collect();
    Tensor::new(volume.shape(), normalized)
}

fn normalize(raw: f64, stats: &FeatureStats) -> f64 {
    let value = if raw.is_nan() { stats.mean } else { raw };
    (value - stats.mean) / stats.sd
}

/// Transform one record with frozen statistics. Missing values are imputed
/// (continuous → training mean, which normalizes to exactly 0; PSG → modal
/// category), and an unseen PSG value is rejected with the known categories.
pub fn apply_preprocess(record: &SubjectRecord, stats: &PreprocessStats) -> Result<PreparedRecord> {
    let amri = zscore_volume(&record.amri, &record.id, "aMRI")?;
    let dti = zscore_volume(&record.dti, &record.id, "DTI")?;
    let fmri = zscore_volume(&record.fmri, &record.id, "fMRI")?;

    let mut features = Vec::with_capacity(stats.feature_dim());
    for (&slot, fs) in CONTINUOUS_CLINICAL.iter().zip(&stats.clinical) {
        features.push(normalize(record.clinical[slot], fs));
    }
    let psg_raw = record.clinical[PSG_INDEX];
    let psg = if psg_raw.is_nan() { stats.psg_mode } else { psg_raw };
    let hot = stats
        .psg_categories
        .iter()
        .position(|&c| c == psg)
        .ok_or_else(|| {
            Error::Data(format!(
                "subject {}: unknown {} value {psg}; known categories: {:?}",
                record.id, CLINICAL_NAMES[PSG_INDEX], stats.psg_categories
            ))
        })?;
    for i in 0..stats.psg_categories.len() {
        features.push(if i == hot { 1.0 } else { 0.0 });
    }
    for (raw, fs) in record.serum.iter().zip(&stats.serum) {
        features.push(normalize(*raw, fs));
    }

    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "subject {}: non-finite feature after preprocessing",
            record.id
        )));
    }
    Ok(PreparedRecord {
        id: record.id.clone(),
        label: record.label,
        amri,
        dti,
        fmri,
        features,
    })
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn rec(id: &str, clinical: [f64; 7], serum: [f64; 3]) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            label: ClassLabel::Pd,
            amri: volume(&[0.0, 1.0]),
            dti: Tensor::new(&[1, 2, 1, 1], vec![0.0, 2.0]).unwrap(),
            fmri: Tensor::new(&[2, 2, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            clinical,
            serum,
        }
    }

    const NAN: f64 = f64::NAN;

    fn three_recs() -> Vec<SubjectRecord> {
        vec![
            rec("a", [1.0, 0.0, 10.0, 1.0, 1.0, 20.0, 30.0], [30.0, 4.0, 5.0]),
            rec("b", [NAN, 1.0, 20.0, 2.0, 1.0, 25.0, 31.0], [40.0, 5.0, NAN]),
            rec("c", [3.0, 1.0, 30.0, 3.0, 1.0, 30.0, 32.0], [50.0, 6.0, 15.0]),
        ]
    }

    #[test]
    fn mean_over_observed_values_only() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        // duration observed as [1, missing, 3] → mean 2.
        assert_eq!(stats.clinical[0].mean, 2.0);
        // Missing value imputes to the mean, which normalizes to exactly 0.
        let prepared = apply_preprocess(&three_recs()[1], &stats).unwrap();
        assert_eq!(prepared.features[0], 0.0);
    }

    #[test]
    fn constant_feature_engages_sd_guard() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        // H&Y is 1.0 everywhere → SD guard → normalized zeros plus a warning.
        assert_eq!(stats.clinical[3].sd, 1.0);
        assert!(stats.warnings.iter().any(|w| w.contains("hoehn_yahr")));
        for r in three_recs() {
            let p = apply_preprocess(&r, &stats).unwrap();
            assert_eq!(p.features[3], 0.0);
        }
    }

    #[test]
    fn all_missing_feature_is_rejected() {
        let mut recs = three_recs();
        for r in &mut recs {
            r.serum[2] = NAN;
        }
        let err = fit_preprocess(&recs).unwrap_err();
        assert!(err.to_string().contains("ifn_gamma"), "{err}");
    }

    #[test]
    fn empty_training_split_is_rejected() {
        assert!(fit_preprocess(&[]).is_err());
    }

    #[test]
    fn psg_one_hot_follows_category_order() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        assert_eq!(stats.psg_categories, vec![0.0, 1.0]);
        assert_eq!(stats.feature_dim(), 11);
        let p0 = apply_preprocess(&three_recs()[0], &stats).unwrap();
        assert_eq!(&p0.features[6..8], &[1.0, 0.0]);
        let p1 = apply_preprocess(&three_recs()[1], &stats).unwrap();
        assert_eq!(&p1.features[6..8], &[0.0, 1.0]);
    }

    #[test]
    fn psg_mode_imputation_prefers_lower_on_tie() {
        let mut recs = three_recs();
        recs[2].clinical[PSG_INDEX] = NAN; // observed [0, 1] → tie → mode 0
        let stats = fit_preprocess(&recs).unwrap();
        assert_eq!(stats.psg_mode, 0.0);
        let p = apply_preprocess(&recs[2], &stats).unwrap();
        assert_eq!(&p.features[6..8], &[1.0, 0.0]);
    }

    #[test]
    fn unseen_psg_value_is_rejected_with_known_categories() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        let mut novel = three_recs().remove(0);
        novel.clinical[PSG_INDEX] = 2.0;
        let err = apply_preprocess(&novel, &stats).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2") && msg.contains("[0.0, 1.0]"), "{msg}");
    }

    #[test]
    fn volumes_are_zscored_per_subject() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        let mut r = three_recs().remove(0);
        r.fmri = Tensor::new(&[2, 2, 1, 1], vec![3.0, 9.0, 1.0, 7.0]).unwrap();
        let p = apply_preprocess(&r, &stats).unwrap();
        for t in [&p.amri, &p.dti, &p.fmri] {
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_volume_normalizes_to_zeros() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        let mut r = three_recs().remove(0);
        r.amri = volume(&[5.0, 5.0]);
        let p = apply_preprocess(&r, &stats).unwrap();
        assert!(p.amri.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn applying_to_new_records_never_changes_stats() {
        let stats = fit_preprocess(&three_recs()).unwrap();
        let frozen = stats.clone();
        let test_rec = rec("t", [9.0, 1.0, 99.0, 9.0, 1.0, 9.0, 9.0], [9.0, 9.0, 9.0]);
        apply_preprocess(&test_rec, &stats).unwrap();
        assert_eq!(stats, frozen);
    }
}
