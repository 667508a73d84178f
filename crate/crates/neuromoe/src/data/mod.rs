//! Cohort data: record types, synthetic generation, preprocessing,
//! stratified splitting, and the checksummed binary container.
//!
//! Missing tabular values are NaN sentinels in memory; the container encodes
//! them as explicit missing bitmaps so files stay NaN-free.

mod container;
mod generate;
mod preprocess;
mod split;

pub use container::{load_dataset, save_dataset};
pub use generate::{generate_cohort, BlobSpec, ClassStats, CohortSpec};
pub use preprocess::{
    apply_preprocess, fit_preprocess, FeatureStats, PreparedRecord, PreprocessStats,
};
pub use split::{split_cohort, split_hash, split_indices};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Diagnostic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    /// Parkinson's disease.
    Pd,
    /// Idiopathic REM-sleep behavior disorder.
    Irbd,
    /// Healthy control.
    Hc,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Pd, ClassLabel::Irbd, ClassLabel::Hc];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Pd => 0,
            ClassLabel::Irbd => 1,
            ClassLabel::Hc => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ClassLabel::Pd),
            1 => Ok(ClassLabel::Irbd),
            2 => Ok(ClassLabel::Hc),
            other => Err(Error::Data(format!(
                "class label {other} out of range (expected 0, 1, or 2)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Pd => "PD",
            ClassLabel::Irbd => "iRBD",
            ClassLabel::Hc => "HC",
        }
    }
}

/// Names of the seven clinical features, in record order.
pub const CLINICAL_NAMES: [&str; 7] = [
    "duration",
    "psg_rbd",
    "updrs3",
    "tug",
    "hoehn_yahr",
    "moca",
    "upsit",
];

/// Index of the categorical PSG result within the clinical vector.
pub const PSG_INDEX: usize = 1;

/// Names of the three serum features, in record order.
pub const SERUM_NAMES: [&str; 3] = ["vitamin_d", "uric_acid", "ifn_gamma"];

/// One subject: three volumetric modalities plus tabular measurements.
/// NaN marks a missing tabular value, so equality of records with missing
/// entries must be checked bitwise, not with `==`.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: String,
    pub label: ClassLabel,
    /// Anatomical volume `[X, Y, Z]`.
    pub amri: Tensor,
    /// Diffusion stack `[T_d, X, Y, Z]`.
    pub dti: Tensor,
    /// Functional stack `[T_f, X, Y, Z]`.
    pub fmri: Tensor,
    /// Clinical measurements, ordered per [`CLINICAL_NAMES`].
    pub clinical: [f64; 7],
    /// Serum measurements, ordered per [`SERUM_NAMES`].
    pub serum: [f64; 3],
}
