//! Mixture of experts.
//!
//! Each active expert maps its modality embedding to class logits through a
//! small ReLU MLP. The gating network maps the raw preprocessed feature
//! vector (not the clinical embedding) to a softmax weight per expert, and
//! fusion is the gate-weighted sum of expert logits. A balance regularizer
//! penalizes squared deviation of batch-mean gate weights from uniform.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::config::{ExpertKind, GatingMode, ModelConfig};
use crate::encoders::linear;
use crate::init;
use crate::{Error, Result};

// ── Experts ──

/// Parameters of one expert head: embedding → hidden (ReLU) → class logits.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub kind: ExpertKind,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertParams {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        kind: ExpertKind,
        seed: u64,
    ) -> Result<Self> {
        let input = match kind {
            ExpertKind::SerumClinical => cfg.clinical_embed,
            _ => cfg.d_model,
        };
        let base = format!("expert.{}", kind.token());
        Ok(ExpertParams {
            kind,
            w1: init::xavier(store, &format!("{base}.w1"), input, cfg.expert_hidden, seed)?,
            b1: init::zeros(store, &format!("{base}.b1"), cfg.expert_hidden)?,
            w2: init::xavier(store, &format!("{base}.w2"), cfg.expert_hidden, cfg.num_classes, seed)?,
            b2: init::zeros(store, &format!("{base}.b2"), cfg.num_classes)?,
        })
    }
}

/// Class logits `[1, num_classes]` of one expert given its embedding.
pub fn expert_forward(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    params: &ExpertParams,
    embedding: NodeId,
) -> Result<NodeId> {
    let w1 = binding.node(tape, store, params.w1);
    let b1 = binding.node(tape, store, params.b1);
    let w2 = binding.node(tape, store, params.w2);
    let b2 = binding.node(tape, store, params.b2);
    let h = linear(tape, embedding, w1, b1)?;
    let act = tape.relu(h);
    linear(tape, act, w2, b2)
}

// ── Gating network ──

/// Parameters of the gating MLP: features → hidden → hidden → expert logits.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

impl GateParams {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let [g0, g1] = cfg.gate_hidden;
        let e = cfg.num_experts();
        Ok(GateParams {
            w1: init::xavier(store, "gate.w1", cfg.feature_dim, g0, seed)?,
            b1: init::zeros(store, "gate.b1", g0)?,
            w2: init::xavier(store, "gate.w2", g0, g1, seed)?,
            b2: init::zeros(store, "gate.b2", g1)?,
            w3: init::xavier(store, "gate.w3", g1, e, seed)?,
            b3: init::zeros(store, "gate.b3", e)?,
        })
    }
}

/// Softmax gate weights `[1, num_experts]` from the raw preprocessed feature
/// vector. ReLU + dropout follow the two hidden layers.
#[allow(clippy::too_many_arguments)]
pub fn gate_forward(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    params: &GateParams,
    cfg: &ModelConfig,
    features: &[f64],
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if features.len() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "gate input has {} features, config expects {}",
            features.len(),
            cfg.feature_dim
        )));
    }
    let x = tape.input(Tensor::matrix(1, cfg.feature_dim, features.to_vec())?);
    let w1 = binding.node(tape, store, params.w1);
    let b1 = binding.node(tape, store, params.b1);
    let w2 = binding.node(tape, store, params.w2);
    let b2 = binding.node(tape, store, params.b2);
    let w3 = binding.node(tape, store, params.w3);
    let b3 = binding.node(tape, store, params.b3);

    let mut h = linear(tape, x, w1, b1)?;
    h = tape.relu(h);
    h = tape.dropout(h, cfg.gate_dropout, training, rng)?;
    h = linear(tape, h, w2, b2)?;
    h = tape.relu(h);
    h = tape.dropout(h, cfg.gate_dropout, training, rng)?;
    let logits = linear(tape, h, w3, b3)?;
    tape.softmax(logits, 1)
}

/// Constant uniform weights `[1, e]` (gate bypass).
pub fn uniform_weights(tape: &mut Tape, e: usize) -> Result<NodeId> {
    let w = Tensor::matrix(1, e, vec![1.0 / e as f64; e])?;
    Ok(tape.input(w))
}

// ── Fusion and regularization ──

/// Gate-weighted sum of expert logits: `weights [1,E] @ stacked logits [E,C]`.
pub fn fuse(tape: &mut Tape, weights: NodeId, expert_logits: &[NodeId]) -> Result<NodeId> {
    let e = tape.value(weights).cols();
    if expert_logits.len() != e {
        return Err(Error::Shape(format!(
            "fuse got {} expert logit rows for {e} gate weights",
            expert_logits.len()
        )));
    }
    let stacked = tape.concat_rows(expert_logits)?;
    tape.matmul(weights, stacked)
}

/// Mean squared deviation of batch-mean gate weights from uniform:
/// `(1/E) * sum_k (mean_j w[j,k] - 1/E)^2` over a `[B, E]` weight matrix.
pub fn balance_regularizer(tape: &mut Tape, gate_rows: NodeId) -> Result<NodeId> {
    let gv = tape.value(gate_rows);
    if gv.rank() != 2 {
        return Err(Error::Shape(format!(
            "balance_regularizer requires [batch, experts], got {:?}",
            gv.shape()
        )));
    }
    let e = gv.cols();
    let mean = tape.mean_axis(gate_rows, 0)?;
    let centered = tape.add_scalar(mean, -1.0 / e as f64);
    let sq = tape.mul(centered, centered)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / e as f64))
}

// ── Assembly ──

/// All mixture parameters: one expert per active kind plus the gate. The
/// gate is constructed in every mode (uniform mode simply never evaluates
/// it, so its parameters keep their initial values).
#[derive(Debug, Clone)]
pub struct MoeParams {
    pub experts: Vec<ExpertParams>,
    pub gate: GateParams,
}

impl MoeParams {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut experts = Vec::with_capacity(cfg.num_experts());
        for &kind in &cfg.experts {
            experts.push(ExpertParams::build(store, cfg, kind, seed)?);
        }
        let gate = GateParams::build(store, cfg, seed)?;
        Ok(MoeParams { experts, gate })
    }
}

/// Fused logits and gate weights for one subject.
pub struct MoeOutput {
    /// `[1, num_classes]` fused logits.
    pub logits: NodeId,
    /// `[1, num_experts]` weights used for fusion (uniform constants when
    /// gating is bypassed).
    pub weights: NodeId,
}

/// Weight expert logits by the gate (or uniform constants) and fuse.
///
/// `embeddings` must supply one embedding node per active expert, in the
/// same order as `cfg.experts`.
#[allow(clippy::too_many_arguments)]
pub fn moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    params: &MoeParams,
    cfg: &ModelConfig,
    embeddings: &[NodeId],
    features: &[f64],
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MoeOutput> {
    if embeddings.len() != params.experts.len() {
        return Err(Error::Shape(format!(
            "moe_forward got {} embeddings for {} experts",
            embeddings.len(),
            params.experts.len()
        )));
    }
    let mut logits = Vec::with_capacity(params.experts.len());
    for (expert, &emb) in params.experts.iter().zip(embeddings) {
        logits.push(expert_forward(tape, store, binding, expert, emb)?);
    }
    let weights = match cfg.gating {
        GatingMode::Gated => gate_forward(
            tape, store, binding, &params.gate, cfg, features, training, rng,
        )?,
        GatingMode::Uniform => uniform_weights(tape, cfg.num_experts())?,
    };
    let fused = fuse(tape, weights, &logits)?;
    Ok(MoeOutput {
        logits: fused,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            volume_shape: [8, 8, 8],
            d_model: 8,
            num_heads: 2,
            num_layers: 1,
            ffn_hidden: 16,
            clinical_hidden: [6, 5],
            clinical_embed: 5,
            gate_hidden: [6, 5],
            expert_hidden: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn expert_zero_weights_yield_bias_logits() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let p = ExpertParams::build(&mut store, &cfg, ExpertKind::Anatomical, 3).unwrap();
        store.value_mut(p.w2).data_mut().fill(0.0);
        store
            .value_mut(p.b2)
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);

        let mut tape = Tape::new();
        let mut binding = Binding::new(&store);
        let emb = tape.input(Tensor::matrix(1, 8, vec![0.3; 8]).unwrap());
        let out = expert_forward(&mut tape, &store, &mut binding, &p, emb).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 3]);
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn gate_output_is_on_simplex() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let p = GateParams::build(&mut store, &cfg, 5).unwrap();
        let mut rng = crate::rng::stream(9, "gate-test");
        for _ in 0..50 {
            let features: Vec<f64> =
                (0..cfg.feature_dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let mut binding = Binding::new(&store);
            let mut drop_rng = crate::rng::stream(0, "drop");
            let w = gate_forward(
                &mut tape, &store, &mut binding, &p, &cfg, &features, false, &mut drop_rng,
            )
            .unwrap();
            let vals = tape.value(w).data();
            assert_eq!(vals.len(), 4);
            assert!(vals.iter().all(|&v| v >= 0.0));
            assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_zero_final_layer_is_uniform() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let p = GateParams::build(&mut store, &cfg, 5).unwrap();
        store.value_mut(p.w3).data_mut().fill(0.0);
        store.value_mut(p.b3).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let mut binding = Binding::new(&store);
        let mut rng = crate::rng::stream(0, "drop");
        let w = gate_forward(
            &mut tape,
            &store,
            &mut binding,
            &p,
            &cfg,
            &vec![1.0; cfg.feature_dim],
            false,
            &mut rng,
        )
        .unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_one_hot_selects_single_expert() {
        let mut tape = Tape::new();
        let l0 = tape.input(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let l1 = tape.input(Tensor::matrix(1, 3, vec![-1.0, 0.0, 1.0]).unwrap());
        let w = tape.input(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let fused = fuse(&mut tape, w, &[l0, l1]).unwrap();
        assert_eq!(tape.value(fused).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn fuse_matches_scalar_loop() {
        let mut rng = crate::rng::stream(2, "fuse-test");
        for _ in 0..20 {
            let e = rng.random_range(1..5usize);
            let c = rng.random_range(2..5usize);
            let mut tape = Tape::new();
            let mut raw_w: Vec<f64> = (0..e).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = raw_w.iter().sum();
            for v in &mut raw_w {
                *v /= total;
            }
            let logits: Vec<Vec<f64>> = (0..e)
                .map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let nodes: Vec<_> = logits
                .iter()
                .map(|row| tape.input(Tensor::matrix(1, c, row.clone()).unwrap()))
                .collect();
            let w = tape.input(Tensor::matrix(1, e, raw_w.clone()).unwrap());
            let fused = fuse(&mut tape, w, &nodes).unwrap();
            for j in 0..c {
                let expect: f64 = (0..e).map(|i| raw_w[i] * logits[i][j]).sum();
                assert!((tape.value(fused).data()[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_identical_experts_is_weight_invariant() {
        let mut tape = Tape::new();
        let row = vec![0.4, -0.2, 1.1];
        let l: Vec<_> = (0..4)
            .map(|_| tape.input(Tensor::matrix(1, 3, row.clone()).unwrap()))
            .collect();
        for weights in [
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.0, 0.0, 1.0, 0.0],
        ] {
            let w = tape.input(Tensor::matrix(1, 4, weights).unwrap());
            let fused = fuse(&mut tape, w, &l).unwrap();
            for (got, want) in tape.value(fused).data().iter().zip(&row) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn balance_regularizer_frozen_values() {
        // Uniform rows: exactly zero.
        let mut tape = Tape::new();
        let uniform = tape.input(Tensor::matrix(3, 4, vec![0.25; 12]).unwrap());
        let r = balance_regularizer(&mut tape, uniform).unwrap();
        assert_eq!(tape.value(r).item().unwrap(), 0.0);

        // Every row one-hot on the same expert: (1/4)*((3/4)^2 + 3*(1/4)^2).
        let mut rows = vec![0.0; 16];
        for r in 0..4 {
            rows[r * 4] = 1.0;
        }
        let onehot = tape.input(Tensor::matrix(4, 4, rows).unwrap());
        let r = balance_regularizer(&mut tape, onehot).unwrap();
        assert!((tape.value(r).item().unwrap() - 0.1875).abs() < 1e-12);

        // Two rows alternating between experts 0 and 1.
        let two = tape.input(
            Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let r = balance_regularizer(&mut tape, two).unwrap();
        assert!((tape.value(r).item().unwrap() - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn moe_forward_uniform_averages_expert_logits() {
        let mut cfg = cfg();
        cfg.gating = GatingMode::Uniform;
        let mut store = ParamStore::new();
        let params = MoeParams::build(&mut store, &cfg, 5).unwrap();

        let mut tape = Tape::new();
        let mut binding = Binding::new(&store);
        let mut rng = crate::rng::stream(0, "drop");
        let mut vol_rng = crate::rng::stream(4, "emb");
        let embeddings: Vec<_> = (0..4)
            .map(|i| {
                let dim = if i == 3 { cfg.clinical_embed } else { cfg.d_model };
                let data: Vec<f64> = (0..dim).map(|_| vol_rng.random_range(-1.0..1.0)).collect();
                tape.input(Tensor::matrix(1, dim, data).unwrap())
            })
            .collect();
        let out = moe_forward(
            &mut tape,
            &store,
            &mut binding,
            &params,
            &cfg,
            &embeddings,
            &vec![0.0; cfg.feature_dim],
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(out.weights).data(), &[0.25; 4]);

        // Fused logits equal the expert average.
        let mut expert_nodes = Vec::new();
        for (expert, &emb) in params.experts.iter().zip(&embeddings) {
            expert_nodes.push(expert_forward(&mut tape, &store, &mut binding, expert, emb).unwrap());
        }
        for j in 0..cfg.num_classes {
            let avg: f64 = expert_nodes
                .iter()
                .map(|&n| tape.value(n).data()[j])
                .sum::<f64>()
                / 4.0;
            assert!((tape.value(out.logits).data()[j] - avg).abs() < 1e-12);
        }
    }
}
