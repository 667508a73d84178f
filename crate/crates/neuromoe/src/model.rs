//! Full model assembly: one encoder per active expert feeding the
//! mixture-of-experts head.
//!
//! The model owns parameter *identities*; values and gradients live in the
//! `ParamStore` so optimizers and checkpoints can treat them uniformly.
//! Parameters are registered in `config.experts` order (then the gate), which
//! keeps checkpoints from identically configured models interchangeable.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, NodeId, ParamStore, Tape, Tensor};
use crate::config::{ExpertKind, Modality, ModelConfig};
use crate::data::PreparedRecord;
use crate::encoders::{clinical_encode, mri_encode, ClinicalEncoderParams, MriEncoderParams};
use crate::moe::{moe_forward, MoeOutput, MoeParams};
use crate::{Error, Result};

#[derive(Debug)]
enum EncoderParams {
    Mri(MriEncoderParams),
    Clinical(ClinicalEncoderParams),
}

/// The assembled classifier.
#[derive(Debug)]
pub struct NeuroMoeModel {
    pub config: ModelConfig,
    /// One encoder per entry of `config.experts`, same order.
    encoders: Vec<(ExpertKind, EncoderParams)>,
    pub moe: MoeParams,
}

/// One micro-batch of forwards sharing a tape.
pub struct BatchForward {
    /// `[B, num_classes]` fused logits, rows in batch order.
    pub logits: NodeId,
    /// `[B, num_experts]` gate weights, rows in batch order.
    pub gate_rows: NodeId,
    /// Per-subject outputs backing the stacked rows.
    pub subjects: Vec<MoeOutput>,
    /// Class indices in batch order, ready for the cross-entropy op.
    pub labels: Vec<usize>,
}

/// Plain-data inference result for one subject.
pub struct Prediction {
    /// Fused class logits.
    pub logits: Vec<f64>,
    /// Softmax probabilities over classes.
    pub probs: Vec<f64>,
    /// Gate weights over active experts.
    pub weights: Vec<f64>,
}

impl NeuroMoeModel {
    /// Validate `cfg`, initialize every parameter, and assemble the model.
    /// Initialization streams are keyed by parameter name, so the result is
    /// independent of registration order and identical across rebuilds.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Self)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut encoders = Vec::with_capacity(cfg.experts.len());
        for &kind in &cfg.experts {
            let params = match kind.modality() {
                Some(modality) => EncoderParams::Mri(MriEncoderParams::build(
                    &mut store,
                    cfg,
                    modality.token(),
                    seed,
                )?),
                None => EncoderParams::Clinical(ClinicalEncoderParams::build(
                    &mut store, cfg, seed,
                )?),
            };
            encoders.push((kind, params));
        }
        let moe = MoeParams::build(&mut store, cfg, seed)?;
        let model = NeuroMoeModel {
            config: cfg.clone(),
            encoders,
            moe,
        };
        Ok((store, model))
    }

    fn volume<'r>(&self, record: &'r PreparedRecord, modality: Modality) -> &'r Tensor {
        match modality {
            Modality::Amri => &record.amri,
            Modality::Dti => &record.dti,
            Modality::Fmri => &record.fmri,
        }
    }

    /// Forward one subject: encode each active modality, then gate and fuse.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_subject(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &mut Binding,
        record: &PreparedRecord,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<MoeOutput> {
        let mut embeddings = Vec::with_capacity(self.encoders.len());
        for (kind, params) in &self.encoders {
            let node = match params {
                EncoderParams::Mri(p) => {
                    let modality = kind.modality().expect("imaging expert has a modality");
                    mri_encode(tape, store, binding, p, &self.config, self.volume(record, modality))?
                }
                EncoderParams::Clinical(p) => clinical_encode(
                    tape,
                    store,
                    binding,
                    p,
                    &self.config,
                    &record.features,
                    training,
                    rng,
                )?,
            };
            embeddings.push(node);
        }
        moe_forward(
            tape,
            store,
            binding,
            &self.moe,
            &self.config,
            &embeddings,
            &record.features,
            training,
            rng,
        )
    }

    /// Forward a micro-batch on one tape, stacking fused logits and gate
    /// weights row-wise for the loss terms.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&PreparedRecord],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Data("cannot forward an empty batch".into()));
        }
        let mut binding = Binding::new(store);
        let mut subjects = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for record in batch {
            subjects.push(self.forward_subject(tape, store, &mut binding, record, training, rng)?);
            labels.push(record.label.index());
        }
        let logit_rows: Vec<NodeId> = subjects.iter().map(|s| s.logits).collect();
        let weight_rows: Vec<NodeId> = subjects.iter().map(|s| s.weights).collect();
        let logits = tape.concat_rows(&logit_rows)?;
        let gate_rows = tape.concat_rows(&weight_rows)?;
        Ok(BatchForward {
            logits,
            gate_rows,
            subjects,
            labels,
        })
    }

    /// Inference for one subject: dropout off, plain-data outputs.
    pub fn predict(&self, store: &ParamStore, record: &PreparedRecord) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut binding = Binding::new(store);
        // Dropout is disabled, so this stream is never drawn from.
        let mut rng = crate::rng::stream(0, "predict");
        let out = self.forward_subject(&mut tape, store, &mut binding, record, false, &mut rng)?;
        let probs = tape.softmax(out.logits, 1)?;
        Ok(Prediction {
            logits: tape.value(out.logits).data().to_vec(),
            probs: tape.value(probs).data().to_vec(),
            weights: tape.value(out.weights).data().to_vec(),
        })
    }
}

// ── Tests ──
