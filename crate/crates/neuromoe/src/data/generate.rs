//! Synthetic cohort generation.
//!
//! Tabular biomarkers are drawn per class from published summary statistics;
//! volumes are a smooth gradient background plus a class- and
//! modality-specific Gaussian blob plus voxel noise, so the classification
//! task is learnable end to end. Every generated value is quantized to f32
//! precision up front, which makes the on-disk container round-trip exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClassLabel, SubjectRecord, PSG_INDEX};
use crate::autodiff::Tensor;
use crate::rng;
use crate::{Error, Result};

/// Per-class mean and SD of one continuous biomarker, indexed by
/// `ClassLabel::index()` (PD, iRBD, HC).
#[derive(Debug, Clone, Copy)]
pub struct ClassStats {
    pub mean: [f64; 3],
    pub sd: [f64; 3],
}

impl ClassStats {
    const fn new(mean: [f64; 3], sd: [f64; 3]) -> Self {
        ClassStats { mean, sd }
    }
}

/// Signal blob for one class/modality pair.
#[derive(Debug, Clone, Copy)]
pub struct BlobSpec {
    /// Fractional blob center, each coordinate in [0, 1], scaled by the
    /// volume extent along that axis.
    pub center: [f64; 3],
    /// Peak intensity added on top of the background.
    pub amplitude: f64,
}

impl BlobSpec {
    const fn new(center: [f64; 3], amplitude: f64) -> Self {
        BlobSpec { center, amplitude }
    }
}

/// Fraction of the blob's sinusoidal amplitude modulation across frames.
const FRAME_MODULATION: f64 = 0.15;

/// Everything that determines a generated cohort. Identical specs (including
/// the seed) produce bit-identical cohorts.
#[derive(Debug, Clone)]
pub struct CohortSpec {
    /// Subjects per class, ordered PD, iRBD, HC.
    pub counts: [usize; 3],
    pub duration: ClassStats,
    /// Probability of a positive polysomnography result per class.
    pub psg_positive: [f64; 3],
    pub updrs3: ClassStats,
    pub tug: ClassStats,
    pub hoehn_yahr: ClassStats,
    pub moca: ClassStats,
    pub upsit: ClassStats,
    pub vitamin_d: ClassStats,
    pub uric_acid: ClassStats,
    pub ifn_gamma: ClassStats,
    /// Independent per-feature probability of masking a tabular value missing.
    pub missing_rate: f64,
    /// Spatial volume dimensions `[X, Y, Z]`.
    pub volume_shape: [usize; 3],
    pub dti_frames: usize,
    pub fmri_frames: usize,
    /// Blob table indexed `[class][modality]`, modalities in `Modality::ALL`
    /// order (aMRI, DTI, fMRI).
    pub blobs: [[BlobSpec; 3]; 3],
    /// Blob sigma as a fraction of the smallest volume dimension.
    pub blob_radius_frac: f64,
    /// SD of the iid voxel noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            counts: [41, 44, 28],
            duration: ClassStats::new([6.11, 6.45, 0.00], [3.41, 3.12, 0.00]),
            psg_positive: [23.0 / 41.0, 42.0 / 44.0, 0.0],
            updrs3: ClassStats::new([29.75, 63.90, 2.81], [15.17, 20.35, 3.11]),
            tug: ClassStats::new([18.93, 21.95, 14.23], [14.61, 2.28, 1.97]),
            hoehn_yahr: ClassStats::new([1.73, 0.00, 0.00], [0.72, 0.00, 0.00]),
            moca: ClassStats::new([27.75, 18.60, 28.54], [2.83, 7.96, 1.97]),
            upsit: ClassStats::new([21.59, 15.40, 35.30], [7.24, 2.61, 4.51]),
            vitamin_d: ClassStats::new([35.68, 33.38, 36.61], [14.39, 7.54, 15.41]),
            uric_acid: ClassStats::new([4.34, 4.50, 4.80], [0.99, 0.34, 1.34]),
            ifn_gamma: ClassStats::new([27.74, 4.21, 33.01], [54.11, 4.00, 58.63]),
            missing_rate: 0.05,
            volume_shape: [32, 32, 32],
            dti_frames: 2,
            fmri_frames: 4,
            blobs: [
                [
                    BlobSpec::new([0.30, 0.30, 0.30], 0.8),
                    BlobSpec::new([0.35, 0.65, 0.30], 0.6),
                    BlobSpec::new([0.70, 0.30, 0.60], 0.7),
                ],
                [
                    BlobSpec::new([0.70, 0.60, 0.40], 0.5),
                    BlobSpec::new([0.60, 0.30, 0.70], 0.9),
                    BlobSpec::new([0.30, 0.70, 0.40], 0.4),
                ],
                [
                    BlobSpec::new([0.50, 0.50, 0.50], 0.2),
                    BlobSpec::new([0.50, 0.50, 0.50], 0.2),
                    BlobSpec::new([0.50, 0.50, 0.50], 0.2),
                ],
            ],
            blob_radius_frac: 0.18,
            noise_sd: 0.05,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        for (class, &n) in ClassLabel::ALL.iter().zip(&self.counts) {
            if n == 0 {
                return Err(Error::Data(format!(
                    "cohort spec: class {} has count 0",
                    class.name()
                )));
            }
        }
        for (name, stats) in self.continuous() {
            for (class, (&m, &s)) in ClassLabel::ALL.iter().zip(stats.mean.iter().zip(&stats.sd)) {
                if !m.is_finite() || !s.is_finite() || s < 0.0 {
                    return Err(Error::Data(format!(
                        "cohort spec: {name} for class {} has invalid stats (mean {m}, sd {s})",
                        class.name()
                    )));
                }
            }
        }
        for (class, &p) in ClassLabel::ALL.iter().zip(&self.psg_positive) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Data(format!(
                    "cohort spec: PSG positive rate {p} for class {} outside [0, 1]",
                    class.name()
                )));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Data(format!(
                "cohort spec: missing rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if self.volume_shape.contains(&0) {
            return Err(Error::Data(format!(
                "cohort spec: volume shape {:?} has a zero dimension",
                self.volume_shape
            )));
        }
        if self.dti_frames == 0 || self.fmri_frames == 0 {
            return Err(Error::Data(
                "cohort spec: frame counts must be at least 1".into(),
            ));
        }
        if !(self.blob_radius_frac > 0.0) || !self.blob_radius_frac.is_finite() {
            return Err(Error::Data(format!(
                "cohort spec: blob radius fraction {} must be positive",
                self.blob_radius_frac
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Data(format!(
                "cohort spec: noise SD {} must be nonnegative",
                self.noise_sd
            )));
        }
        Ok(())
    }

    /// Continuous biomarkers with their names, in record order (PSG excluded).
    fn continuous(&self) -> [(&'static str, &ClassStats); 9] {
        [
            ("duration", &self.duration),
            ("updrs3", &self.updrs3),
            ("tug", &self.tug),
            ("hoehn_yahr", &self.hoehn_yahr),
            ("moca", &self.moca),
            ("upsit", &self.upsit),
            ("vitamin_d", &self.vitamin_d),
            ("uric_acid", &self.uric_acid),
            ("ifn_gamma", &self.ifn_gamma),
        ]
    }
}

/// Round-trip through f32, the container's payload precision.
#[inline]
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// One biomarker draw: N(mean, sd²) clipped at zero (all modeled biomarkers
/// are nonnegative), quantized. A standard-normal sample is consumed even
/// when sd = 0 so the stream layout does not depend on the stats.
fn draw_biomarker(rng: &mut ChaCha8Rng, stats: &ClassStats, class: usize) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    quantize((stats.mean[class] + stats.sd[class] * z).max(0.0))
}

/// Deterministic background intensity from a fixed spatial gradient.
fn background(frac: [f64; 3]) -> f64 {
    0.3 * frac[0] + 0.2 * frac[1] + 0.1 * frac[2]
}

/// Per-voxel signal components: `base[i] + blob[i]` is the noiseless volume.
fn signal_components(spec: &CohortSpec, blob: &BlobSpec) -> (Vec<f64>, Vec<f64>) {
    let [nx, ny, nz] = spec.volume_shape;
    let sigma = spec.blob_radius_frac * nx.min(ny).min(nz) as f64;
    let center: Vec<f64> = (0..3)
        .map(|a| blob.center[a] * (spec.volume_shape[a].max(1) - 1) as f64)
        .collect();
    let extent = |d: usize| if d > 1 { (d - 1) as f64 } else { 1.0 };
    let mut base = Vec::with_capacity(nx * ny * nz);
    let mut bump = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let frac = [
                    x as f64 / extent(nx),
                    y as f64 / extent(ny),
                    z as f64 / extent(nz),
                ];
                base.push(background(frac));
                let d2 = (x as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (z as f64 - center[2]).powi(2);
                bump.push(blob.amplitude * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    (base, bump)
}

/// Build one modality volume. `frames = None` gives a rank-3 volume; `Some(t)`
/// stacks `t` frames with the blob amplitude modulated sinusoidally across
/// frames. Noise is drawn in data order (frame-major), one sample per voxel.
fn build_volume(
    rng: &mut ChaCha8Rng,
    spec: &CohortSpec,
    blob: &BlobSpec,
    frames: Option<usize>,
) -> Tensor {
    let (base, bump) = signal_components(spec, blob);
    let [nx, ny, nz] = spec.volume_shape;
    let t = frames.unwrap_or(1);
    let mut data = Vec::with_capacity(t * base.len());
    for frame in 0..t {
        let modulation = if frames.is_some() {
            1.0 + FRAME_MODULATION * (2.0 * std::f64::consts::PI * frame as f64 / t as f64).sin()
        } else {
            1.0
        };
        for i in 0..base.len() {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(quantize(base[i] + modulation * bump[i] + spec.noise_sd * noise));
        }
    }
    let shape = match frames {
        Some(t) => vec![t, nx, ny, nz],
        None => vec![nx, ny, nz],
    };
    Tensor::new(&shape, data).expect("generated volume shape is consistent")
}

/// Draw one subject from its own derived stream. The draw order — clinical
/// biomarkers in record order (PSG second), serum biomarkers, the missingness
/// mask over all ten tabular features, then aMRI, DTI, fMRI voxel noise — is
/// fixed and is part of the determinism contract.
fn generate_subject(spec: &CohortSpec, index: usize, label: ClassLabel) -> SubjectRecord {
    let mut rng = rng::stream(spec.seed, &format!("subject/{index}"));
    let c = label.index();

    let mut clinical = [0.0; 7];
    clinical[0] = draw_biomarker(&mut rng, &spec.duration, c);
    clinical[PSG_INDEX] = if rng.random::<f64>() < spec.psg_positive[c] {
        1.0
    } else {
        0.0
    };
    clinical[2] = draw_biomarker(&mut rng, &spec.updrs3, c);
    clinical[3] = draw_biomarker(&mut rng, &spec.tug, c);
    clinical[4] = draw_biomarker(&mut rng, &spec.hoehn_yahr, c);
    clinical[5] = draw_biomarker(&mut rng, &spec.moca, c);
    clinical[6] = draw_biomarker(&mut rng, &spec.upsit, c);
    let mut serum = [
        draw_biomarker(&mut rng, &spec.vitamin_d, c),
        draw_biomarker(&mut rng, &spec.uric_acid, c),
        draw_biomarker(&mut rng, &spec.ifn_gamma, c),
    ];
    for slot in clinical.iter_mut().chain(serum.iter_mut()) {
        if rng.random::<f64>() < spec.missing_rate {
            *slot = f64::NAN;
        }
    }

    let amri = build_volume(&mut rng, spec, &spec.blobs[c][0], None);
    let dti = build_volume(&mut rng, spec, &spec.blobs[c][1], Some(spec.dti_frames));
    let fmri = build_volume(&mut rng, spec, &spec.blobs[c][2], Some(spec.fmri_frames));

    SubjectRecord {
        id: format!("subj-{index:03}"),
        label,
        amri,
        dti,
        fmri,
        clinical,
        serum,
    }
}

/// Generate the full cohort: classes in label order, subjects numbered
/// globally. Each subject derives its own stream, so records are independent
/// of cohort composition ahead of them only through their global index.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let total: usize = spec.counts.iter().sum();
    let mut records = Vec::with_capacity(total);
    let mut index = 0;
    for (class_idx, &label) in ClassLabel::ALL.iter().enumerate() {
        for _ in 0..spec.counts[class_idx] {
            records.push(generate_subject(spec, index, label));
            index += 1;
        }
    }
    Ok(records)
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::super::testutil::records_bitwise_eq;
    use super::*;

    fn small_spec() -> CohortSpec {
        CohortSpec {
            volume_shape: [4, 4, 4],
            dti_frames: 1,
            fmri_frames: 2,
            seed: 7,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn default_cohort_has_published_class_counts() {
        let records = generate_cohort(&small_spec()).unwrap();
        assert_eq!(records.len(), 113);
        let count = |l: ClassLabel| records.iter().filter(|r| r.label == l).count();
        assert_eq!(count(ClassLabel::Pd), 41);
        assert_eq!(count(ClassLabel::Irbd), 44);
        assert_eq!(count(ClassLabel::Hc), 28);
        assert_eq!(records[0].id, "subj-000");
        assert_eq!(records[112].id, "subj-112");
    }

    #[test]
    fn degenerate_biomarkers_are_exactly_zero() {
        // Zero-SD, zero-mean entries (HC duration, iRBD and HC H&Y) and the
        // HC PSG rate of 0 must come out exactly 0 wherever observed.
        let records = generate_cohort(&small_spec()).unwrap();
        for r in &records {
            if r.label == ClassLabel::Hc {
                for &v in &[r.clinical[0], r.clinical[PSG_INDEX]] {
                    assert!(v.is_nan() || v == 0.0, "{}: expected 0, got {v}", r.id);
                }
            }
            if r.label != ClassLabel::Pd {
                let hy = r.clinical[4];
                assert!(hy.is_nan() || hy == 0.0, "{}: H&Y {hy}", r.id);
            }
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let a = generate_cohort(&small_spec()).unwrap();
        let b = generate_cohort(&small_spec()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| records_bitwise_eq(x, y)));
    }

    #[test]
    fn volumes_have_configured_shapes_and_f32_values() {
        let spec = small_spec();
        let r = &generate_cohort(&spec).unwrap()[0];
        assert_eq!(r.amri.shape(), &[4, 4, 4]);
        assert_eq!(r.dti.shape(), &[1, 4, 4, 4]);
        assert_eq!(r.fmri.shape(), &[2, 4, 4, 4]);
        for t in [&r.amri, &r.dti, &r.fmri] {
            assert!(t.data().iter().all(|&v| v == quantize(v)));
        }
        for &v in r.clinical.iter().chain(&r.serum) {
            assert!(v.is_nan() || v == quantize(v));
        }
    }

    #[test]
    fn missing_rate_masks_roughly_five_percent() {
        let mut spec = small_spec();
        spec.counts = [400, 400, 200];
        let records = generate_cohort(&spec).unwrap();
        let total = records.len() * 10;
        let missing: usize = records
            .iter()
            .map(|r| r.clinical.iter().chain(&r.serum).filter(|v| v.is_nan()).count())
            .sum();
        let rate = missing as f64 / total as f64;
        // 3 binomial SEs around 0.05 at n = 10 000.
        assert!((rate - 0.05).abs() < 3.0 * (0.05_f64 * 0.95 / total as f64).sqrt());
    }

    #[test]
    fn blob_raises_intensity_at_its_center() {
        let mut spec = small_spec();
        spec.volume_shape = [16, 16, 16];
        spec.noise_sd = 0.0;
        let records = generate_cohort(&spec).unwrap();
        let pd = &records[0];
        // PD aMRI blob sits at fractional (0.3, 0.3, 0.3) with amplitude 0.8.
        let dims = [16, 16, 16];
        let at = |t: &Tensor, x: usize, y: usize, z: usize| {
            t.data()[(x * dims[1] + y) * dims[2] + z]
        };
        let cx = (0.3_f64 * 15.0).round() as usize;
        let near = at(&pd.amri, cx, cx, cx);
        let far = at(&pd.amri, 0, 15, 15);
        assert!(near > far + 0.5, "near {near} far {far}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.counts = [0, 1, 1];
        assert!(generate_cohort(&spec).is_err());
        let mut spec = small_spec();
        spec.missing_rate = 1.0;
        assert!(generate_cohort(&spec).is_err());
        let mut spec = small_spec();
        spec.updrs3.sd[0] = -1.0;
        assert!(generate_cohort(&spec).is_err());
        let mut spec = small_spec();
        spec.psg_positive[1] = 1.5;
        assert!(generate_cohort(&spec).is_err());
    }
}
