//! Model and training configuration.
//!
//! `ModelConfig` pins every architectural hyperparameter and canonicalizes to
//! a stable text form whose SHA-256 digest fingerprints checkpoints: loading
//! a checkpoint under a structurally different config is rejected up front.

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Imaging modality of a volumetric input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Anatomical MRI: single 3-D volume.
    Amri,
    /// Diffusion imaging: small stack of 3-D frames.
    Dti,
    /// Functional MRI: stack of 3-D frames.
    Fmri,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Amri, Modality::Dti, Modality::Fmri];

    pub fn token(self) -> &'static str {
        match self {
            Modality::Amri => "amri",
            Modality::Dti => "dti",
            Modality::Fmri => "fmri",
        }
    }
}

/// Expert identity, in canonical fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpertKind {
    /// Functional-MRI expert.
    Functional,
    /// Anatomical-MRI expert.
    Anatomical,
    /// Diffusion-MRI expert.
    Diffusion,
    /// Serum/clinical tabular expert.
    SerumClinical,
}

impl ExpertKind {
    /// Canonical order: functional, anatomical, diffusion, serum/clinical.
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Functional,
        ExpertKind::Anatomical,
        ExpertKind::Diffusion,
        ExpertKind::SerumClinical,
    ];

    /// Short token used in parameter names and canonical config text.
    pub fn token(self) -> &'static str {
        match self {
            ExpertKind::Functional => "fmri",
            ExpertKind::Anatomical => "amri",
            ExpertKind::Diffusion => "dti",
            ExpertKind::SerumClinical => "clinical",
        }
    }

    /// Human-readable label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ExpertKind::Functional => "fMRI",
            ExpertKind::Anatomical => "aMRI",
            ExpertKind::Diffusion => "DTI",
            ExpertKind::SerumClinical => "serum/clinical",
        }
    }

    /// The volumetric modality backing this expert, if any.
    pub fn modality(self) -> Option<Modality> {
        match self {
            ExpertKind::Functional => Some(Modality::Fmri),
            ExpertKind::Anatomical => Some(Modality::Amri),
            ExpertKind::Diffusion => Some(Modality::Dti),
            ExpertKind::SerumClinical => None,
        }
    }

    fn position(self) -> usize {
        ExpertKind::ALL.iter().position(|&k| k == self).expect("in ALL")
    }
}

/// How multi-frame volumes are reduced to one volume before patchify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalCollapse {
    /// Voxel-wise mean over frames (default).
    Mean,
    /// Keep only the first frame.
    FirstFrame,
}

impl TemporalCollapse {
    fn token(self) -> &'static str {
        match self {
            TemporalCollapse::Mean => "mean",
            TemporalCollapse::FirstFrame => "first",
        }
    }
}

/// How expert outputs are weighted at fusion time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    /// Weights from the clinically driven gating network (default).
    Gated,
    /// Fixed uniform weights 1/E; the gate network is bypassed entirely.
    Uniform,
}

impl GatingMode {
    fn token(self) -> &'static str {
        match self {
            GatingMode::Gated => "gated",
            GatingMode::Uniform => "uniform",
        }
    }
}

/// Architectural hyperparameters. Defaults give the reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Cubic patch edge length for patchify.
    pub patch_size: usize,
    /// Spatial dimensions of every input volume.
    pub volume_shape: [usize; 3],
    /// Transformer embedding width.
    pub d_model: usize,
    /// Attention heads per layer.
    pub num_heads: usize,
    /// Transformer encoder layers per modality.
    pub num_layers: usize,
    /// Hidden width of the transformer feed-forward blocks.
    pub ffn_hidden: usize,
    /// Hidden widths of the tabular (clinical/serum) encoder MLP.
    pub clinical_hidden: [usize; 2],
    /// Output width of the tabular encoder.
    pub clinical_embed: usize,
    /// Dropout probability inside the tabular encoder.
    pub clinical_dropout: f64,
    /// Hidden widths of the gating network MLP.
    pub gate_hidden: [usize; 2],
    /// Dropout probability inside the gating network.
    pub gate_dropout: f64,
    /// Hidden width of each expert classification head.
    pub expert_hidden: usize,
    /// Number of output classes.
    pub num_classes: usize,
    /// Length of the preprocessed tabular feature vector (continuous
    /// clinical + one-hot categorical + serum).
    pub feature_dim: usize,
    /// Reduction of multi-frame volumes before patchify.
    pub temporal_collapse: TemporalCollapse,
    /// Expert weighting mode.
    pub gating: GatingMode,
    /// Active experts, in canonical order. Ablations remove entries.
    pub experts: Vec<ExpertKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 4,
            volume_shape: [32, 32, 32],
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_hidden: 128,
            clinical_hidden: [32, 16],
            clinical_embed: 16,
            clinical_dropout: 0.3,
            gate_hidden: [32, 16],
            gate_dropout: 0.3,
            expert_hidden: 32,
            num_classes: 3,
            feature_dim: 11,
            temporal_collapse: TemporalCollapse::Mean,
            gating: GatingMode::Gated,
            experts: ExpertKind::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        for (i, &d) in self.volume_shape.iter().enumerate() {
            if d == 0 || d % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "volume dimension {i} ({d}) must be a positive multiple of patch_size {}",
                    self.patch_size
                )));
            }
        }
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.ffn_hidden == 0 || self.expert_hidden == 0 {
            return Err(Error::Config(
                "num_layers, ffn_hidden, and expert_hidden must be positive".into(),
            ));
        }
        if self.clinical_hidden.contains(&0)
            || self.gate_hidden.contains(&0)
            || self.clinical_embed == 0
        {
            return Err(Error::Config(
                "clinical/gate hidden widths and clinical_embed must be positive".into(),
            ));
        }
        for (what, p) in [
            ("clinical_dropout", self.clinical_dropout),
            ("gate_dropout", self.gate_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must lie in [0,1), got {p}")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.experts.is_empty() {
            return Err(Error::Config("at least one expert must be active".into()));
        }
        let mut last = None;
        for &k in &self.experts {
            if let Some(prev) = last {
                if k.position() <= prev {
                    return Err(Error::Config(
                        "experts must be unique and in canonical order \
                         (fmri, amri, dti, clinical)"
                            .into(),
                    ));
                }
            }
            last = Some(k.position());
        }
        Ok(())
    }

    /// Number of patch tokens per volume.
    pub fn num_patches(&self) -> usize {
        self.volume_shape
            .iter()
            .map(|d| d / self.patch_size)
            .product()
    }

    /// Flattened voxel count per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size.pow(3)
    }

    /// Number of active experts.
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Whether a given expert participates in fusion.
    pub fn has_expert(&self, kind: ExpertKind) -> bool {
        self.experts.contains(&kind)
    }

    /// Volumetric modalities required by the active experts.
    pub fn active_modalities(&self) -> Vec<Modality> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            if self.experts.iter().any(|k| k.modality() == Some(m)) {
                out.push(m);
            }
        }
        out
    }

    /// Stable, human-readable canonical form; the basis of the fingerprint.
    pub fn canonical_text(&self) -> String {
        let experts: Vec<&str> = self.experts.iter().map(|k| k.token()).collect();
        format!(
            "patch_size = {}\n\
             volume_shape = {}x{}x{}\n\
             d_model = {}\n\
             num_heads = {}\n\
             num_layers = {}\n\
             ffn_hidden = {}\n\
             clinical_hidden = {},{}\n\
             clinical_embed = {}\n\
             clinical_dropout = {}\n\
             gate_hidden = {},{}\n\
             gate_dropout = {}\n\
             expert_hidden = {}\n\
             num_classes = {}\n\
             feature_dim = {}\n\
             temporal_collapse = {}\n\
             gating = {}\n\
             experts = {}\n",
            self.patch_size,
            self.volume_shape[0],
            self.volume_shape[1],
            self.volume_shape[2],
            self.d_model,
            self.num_heads,
            self.num_layers,
            self.ffn_hidden,
            self.clinical_hidden[0],
            self.clinical_hidden[1],
            self.clinical_embed,
            self.clinical_dropout,
            self.gate_hidden[0],
            self.gate_hidden[1],
            self.gate_dropout,
            self.expert_hidden,
            self.num_classes,
            self.feature_dim,
            self.temporal_collapse.token(),
            self.gating.token(),
            experts.join(","),
        )
    }

    /// SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    /// Apply a `key = value` override. Returns false if the key is not a
    /// model-config key (so callers can try other config structs).
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "volume_shape" => self.volume_shape = parse_dims3(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "num_heads" => self.num_heads = parse_num(key, value)?,
            "num_layers" => self.num_layers = parse_num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_num(key, value)?,
            "clinical_hidden" => self.clinical_hidden = parse_pair(key, value)?,
            "clinical_embed" => self.clinical_embed = parse_num(key, value)?,
            "clinical_dropout" => self.clinical_dropout = parse_num(key, value)?,
            "gate_hidden" => self.gate_hidden = parse_pair(key, value)?,
            "gate_dropout" => self.gate_dropout = parse_num(key, value)?,
            "expert_hidden" => self.expert_hidden = parse_num(key, value)?,
            "temporal_collapse" => {
                self.temporal_collapse = match value {
                    "mean" => TemporalCollapse::Mean,
                    "first" => TemporalCollapse::FirstFrame,
                    other => {
                        return Err(Error::Config(format!(
                            "temporal_collapse must be 'mean' or 'first', got '{other}'"
                        )))
                    }
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Optimization hyperparameters. Defaults give the reference protocol:
/// micro-batches of 8 with 4-step gradient accumulation, Adam at 0.001
/// cosine-annealed to zero over 100 epochs, balance weight 0.01.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Micro-batch size.
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged per optimizer step.
    pub accumulation_steps: usize,
    /// Total training epochs.
    pub epochs: usize,
    /// Initial learning rate.
    pub lr_init: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Adam denominator stabilizer.
    pub adam_eps: f64,
    /// Weight of the gate-balance regularizer.
    pub lambda_balance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            accumulation_steps: 4,
            epochs: 100,
            lr_init: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_balance: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size, accumulation_steps, and epochs must be positive".into(),
            ));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Config(format!(
                "lr_init must be positive and finite, got {}",
                self.lr_init
            )));
        }
        if !(0.0..=self.lr_init).contains(&self.lr_min) {
            return Err(Error::Config(format!(
                "lr_min must lie in [0, lr_init], got {}",
                self.lr_min
            )));
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{what} must lie in [0,1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!(
                "adam_eps must be positive, got {}",
                self.adam_eps
            )));
        }
        if !(self.lambda_balance >= 0.0) || !self.lambda_balance.is_finite() {
            return Err(Error::Config(format!(
                "lambda_balance must be non-negative and finite, got {}",
                self.lambda_balance
            )));
        }
        Ok(())
    }

    /// Apply a `key = value` override. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "accumulation_steps" => self.accumulation_steps = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr_init" => self.lr_init = parse_num(key, value)?,
            "lr_min" => self.lr_min = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "lambda_balance" => self.lambda_balance = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: '{value}'")))
}

pub(crate) fn parse_dims3(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.split(['x', ',']).collect();
    match parts.as_slice() {
        [a, b, c] => Ok([
            parse_num(key, a.trim())?,
            parse_num(key, b.trim())?,
            parse_num(key, c.trim())?,
        ]),
        [a] => {
            let d = parse_num(key, a.trim())?;
            Ok([d, d, d])
        }
        _ => Err(Error::Config(format!(
            "{key} expects 'X x Y x Z' or a single cube edge, got '{value}'"
        ))),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "{key} expects two comma-separated sizes, got '{value}'"
        )));
    }
    Ok([
        parse_num(key, parts[0].trim())?,
        parse_num(key, parts[1].trim())?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 512);
        assert_eq!(cfg.patch_dim(), 64);
        assert_eq!(cfg.num_experts(), 4);
    }

    #[test]
    fn fingerprint_tracks_structure() {
        let a = ModelConfig::default();
        let mut b = ModelConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.d_model = 32;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn validation_rejects_bad_divisibility() {
        let mut cfg = ModelConfig::default();
        cfg.volume_shape = [30, 32, 32];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_rejects_expert_disorder() {
        let mut cfg = ModelConfig::default();
        cfg.experts = vec![ExpertKind::Anatomical, ExpertKind::Functional];
        assert!(cfg.validate().is_err());
        cfg.experts = vec![ExpertKind::Functional, ExpertKind::Functional];
        assert!(cfg.validate().is_err());
        cfg.experts = vec![ExpertKind::Functional, ExpertKind::Anatomical];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fall_through() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("d_model", "32").unwrap());
        assert_eq!(cfg.d_model, 32);
        assert!(cfg.set("volume_shape", "16").unwrap());
        assert_eq!(cfg.volume_shape, [16, 16, 16]);
        assert!(!cfg.set("epochs", "5").unwrap());

        let mut tc = TrainConfig::default();
        assert!(tc.set("epochs", "5").unwrap());
        assert_eq!(tc.epochs, 5);
        assert!(tc.set("lr_init", "abc").is_err());
    }

    #[test]
    fn kv_lines_parse_with_comments() {
        let lines = parse_kv_lines("# header\n d_model = 32 # inline\n\nepochs=5\n").unwrap();
        assert_eq!(
            lines,
            vec![
                ("d_model".to_string(), "32".to_string()),
                ("epochs".to_string(), "5".to_string())
            ]
        );
        assert!(parse_kv_lines("nonsense line").is_err());
    }

    #[test]
    fn train_config_validation() {
        TrainConfig::default().validate().unwrap();
        let mut tc = TrainConfig::default();
        tc.lr_min = 0.01; // above lr_init
        assert!(tc.validate().is_err());
        let mut tc = TrainConfig::default();
        tc.lambda_balance = -0.5;
        assert!(tc.validate().is_err());
    }
}
