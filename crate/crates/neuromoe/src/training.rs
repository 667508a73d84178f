//! Optimization: cosine-annealed Adam over the composite loss
//! (cross-entropy + λ · gate-balance), with gradient accumulation,
//! per-epoch test evaluation, best-checkpoint tracking, and checkpoint I/O.
//!
//! Determinism: the parameter initialization, per-epoch shuffles, and
//! dropout masks all come from labeled streams of the run seed, so a
//! (seed, config, data) triple fixes every recorded number.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::bytes::{push_u32, Reader};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::PreparedRecord;
use crate::evaluation::{argmax, evaluate};
use crate::model::NeuroMoeModel;
use crate::moe::balance_regularizer;
use crate::rng;
use crate::{Error, Result};

// ── Learning-rate schedule ──

/// Cosine annealing from `lr_init` (epoch 0) to `lr_min` (final epoch):
/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·epoch/(epochs−1)))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            cfg.epochs
        )));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_init);
    }
    let progress = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_min
        + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── Adam ──

/// First/second moment buffers, one pair per parameter, plus the shared step
/// counter. Built against a specific store layout.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.value(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update from the gradients currently accumulated in
/// `store`. The caller zeroes gradients afterwards.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let (value, grad) = store.value_grad_mut(id);
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        if m.len() != value.len() {
            return Err(Error::Contract(format!(
                "optimizer state for parameter {slot} has {} values, store has {}",
                m.len(),
                value.len()
            )));
        }
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

// ── Training loop ──

/// Everything recorded about one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-subject cross-entropy over the epoch's training forwards.
    pub ce_loss: f64,
    /// Mean (unscaled) balance-regularizer value over the epoch's batches,
    /// weighted by batch size.
    pub balance_loss: f64,
    /// Accuracy of the training-mode forwards (dropout active).
    pub train_accuracy: f64,
    /// Accuracy on the held-out split, dropout disabled.
    pub test_accuracy: f64,
    /// Per-expert mean gate weight over the epoch's training forwards.
    pub mean_gate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the returned store holds.
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
}

/// A finished run: model structure, the parameters of the best epoch (by
/// held-out accuracy, strictly-improved updates), and the full history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: NeuroMoeModel,
    pub store: ParamStore,
    pub history: TrainHistory,
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.value(id).clone()).collect()
}

fn restore(store: &mut ParamStore, values: Vec<Tensor>) {
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.value_mut(id) = v;
    }
}

/// Run the full protocol: per epoch, shuffle the training split, forward
/// micro-batches of `batch_size`, accumulate gradients of
/// `cross_entropy + λ·balance` for `accumulation_steps` micro-batches (fewer
/// at the epoch boundary), average them, and take one Adam step at the
/// epoch's cosine learning rate; then evaluate the held-out split and keep
/// the parameters whenever its accuracy strictly improves.
///
/// The held-out split steers model selection here, mirroring the replicated
/// protocol; it is not an unbiased generalization estimate.
pub fn train(
    train_set: &[PreparedRecord],
    test_set: &[PreparedRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Data(
            "held-out split is empty; best-model selection needs it".into(),
        ));
    }
    for r in train_set.iter().chain(test_set) {
        if r.features.len() != model_cfg.feature_dim {
            return Err(Error::Shape(format!(
                "subject {}: feature vector length {} does not match configured feature_dim {}",
                r.id,
                r.features.len(),
                model_cfg.feature_dim
            )));
        }
    }

    let (mut store, model) = NeuroMoeModel::build(model_cfg, seed)?;
    let mut adam = AdamState::new(&store);
    let n_experts = model_cfg.num_experts();
    let n_train = train_set.len() as f64;

    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_values: Vec<Tensor> = Vec::new();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..train_cfg.epochs {
        let lr = cosine_lr(epoch, train_cfg)?;
        indices.shuffle(&mut rng::stream(seed, &format!("train/epoch/{epoch}/shuffle")));
        let mut dropout_rng = rng::stream(seed, &format!("train/epoch/{epoch}/dropout"));

        let mut ce_sum = 0.0;
        let mut balance_sum = 0.0;
        let mut correct = 0usize;
        let mut gate_sums = vec![0.0; n_experts];
        let mut accumulated = 0usize;
        let num_batches = indices.chunks(train_cfg.batch_size).len();

        for (batch_idx, chunk) in indices.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, &store, &batch, true, &mut dropout_rng)?;
            let ce = tape.cross_entropy(fwd.logits, &fwd.labels)?;
            let reg = balance_regularizer(&mut tape, fwd.gate_rows)?;
            let scaled = tape.scale(reg, train_cfg.lambda_balance);
            let loss = tape.add(ce, scaled)?;

            let ce_value = tape.value(ce).item()?;
            let reg_value = tape.value(reg).item()?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss_value} at epoch {epoch}, batch {batch_idx} \
                     (cross-entropy {ce_value}, balance {reg_value})"
                )));
            }
            ce_sum += ce_value * batch.len() as f64;
            balance_sum += reg_value * batch.len() as f64;
            for (subject, rec) in fwd.subjects.iter().zip(&batch) {
                if argmax(tape.value(subject.logits).data()) == rec.label.index() {
                    correct += 1;
                }
                for (sum, &w) in gate_sums.iter_mut().zip(tape.value(subject.weights).data()) {
                    *sum += w;
                }
            }

            tape.backward(loss, &mut store)?;
            accumulated += 1;
            if accumulated == train_cfg.accumulation_steps || batch_idx + 1 == num_batches {
                store.scale_grads(1.0 / accumulated as f64);
                adam_step(&mut store, &mut adam, train_cfg, lr)?;
                store.zero_grads();
                accumulated = 0;
            }
        }

        let test_accuracy = evaluate(&model, &store, test_set)?.accuracy;
        if test_accuracy > best_accuracy {
            best_accuracy = test_accuracy;
            best_epoch = epoch;
            best_values = snapshot(&store);
        }
        epochs.push(EpochStats {
            epoch,
            lr,
            ce_loss: ce_sum / n_train,
            balance_loss: balance_sum / n_train,
            train_accuracy: correct as f64 / n_train,
            test_accuracy,
            mean_gate: gate_sums.iter().map(|s| s / n_train).collect(),
        });
    }

    restore(&mut store, best_values);
    Ok(TrainOutcome {
        model,
        store,
        history: TrainHistory {
            epochs,
            best_epoch,
            best_test_accuracy: best_accuracy,
        },
    })
}

// ── Checkpoints ──

const CK_MAGIC: &[u8; 4] = b"NMCK";
const CK_VERSION: u32 = 1;

/// Write all parameters with the config fingerprint. Parameters are emitted
/// in name order, so identical parameter values always produce identical
/// bytes.
pub fn save_checkpoint(store: &ParamStore, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CK_MAGIC);
    push_u32(&mut buf, CK_VERSION);
    buf.extend_from_slice(&cfg.fingerprint());
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Data(format!("{} parameters exceed the u32 count field", store.len())))?;
    push_u32(&mut buf, count);

    let mut entries: Vec<_> = store.ids().map(|id| (store.name(id).to_string(), id)).collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, id) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| {
            Error::Data(format!("parameter name of {} bytes exceeds u16", name.len()))
        })?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let value = store.value(id);
        buf.push(value.rank() as u8);
        for &d in value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Data(format!("parameter {name}: dimension {d} exceeds u32")))?;
            push_u32(&mut buf, d);
        }
        for &x in value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf.extend_from_slice(&crc32fast::hash(&buf).to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Rebuild a model under `cfg` and overwrite its parameters from the
/// checkpoint. The stored fingerprint must match `cfg` exactly, and the
/// stored parameter set must cover the model's parameters exactly once each.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<(ParamStore, NeuroMoeModel)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 48 {
        return Err(Error::Format(format!(
            "file is {} byte(s); a valid checkpoint is at least 48",
            bytes.len()
        )));
    }
    let trailer_offset = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[trailer_offset..].try_into().unwrap());
    let computed_crc = crc32fast::hash(&bytes[..trailer_offset]);

    let mut r = Reader::new(&bytes[..trailer_offset]);
    let magic = r.take(4, "magic")?;
    if magic != CK_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:02x?} at offset 0 (expected \"NMCK\")"
        )));
    }
    let version = r.u32("checkpoint version")?;
    if version != CK_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} at offset 4 (expected {CK_VERSION})"
        )));
    }
    if stored_crc != computed_crc {
        return Err(Error::Format(format!(
            "checkpoint checksum mismatch at offset {trailer_offset} \
             (stored {stored_crc:08x}, computed {computed_crc:08x})"
        )));
    }
    let fingerprint = r.take(32, "config fingerprint")?;
    if fingerprint != cfg.fingerprint() {
        return Err(Error::Config(
            "checkpoint was written under a different model configuration \
             (fingerprint mismatch); architecture fields must match exactly"
                .into(),
        ));
    }

    let (mut store, model) = NeuroMoeModel::build(cfg, 0)?;
    let count = r.u32("parameter count")? as usize;
    if count != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model has {}",
            store.len()
        )));
    }
    let mut seen = vec![false; store.len()];
    for _ in 0..count {
        let name_offset = r.pos;
        let name_len = r.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| {
                Error::Format(format!("parameter name at offset {name_offset} is not UTF-8"))
            })?
            .to_string();
        let id = store.lookup(&name).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint parameter {name} does not exist in the model"
            ))
        })?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(Error::Format(format!(
                "checkpoint lists parameter {name} twice"
            )));
        }
        let rank = r.u8(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for axis in 0..rank {
            shape.push(r.u32(&format!("{name} dimension {axis}"))? as usize);
        }
        if shape != store.value(id).shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {shape:?} does not match model shape {:?}",
                store.value(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(r.f64(&format!("{name} value {i}"))?);
        }
        *store.value_mut(id) = Tensor::new(&shape, data)?;
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} unexpected byte(s) at offset {} after the last parameter",
            r.bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok((store, model))
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GatingMode;
    use crate::data::ClassLabel;

    fn small_cfg() -> ModelConfig {
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

    fn record(cfg: &ModelConfig, label: ClassLabel, salt: f64) -> PreparedRecord {
        let [x, y, z] = cfg.volume_shape;
        // Class signal in the volume mean so a tiny run can learn something.
        let class_shift = label.index() as f64 * 0.8;
        let vol = |frames: usize, offset: f64| {
            let data: Vec<f64> = (0..frames * x * y * z)
                .map(|i| ((i as f64 * 0.13 + offset).sin()) * 0.3 + class_shift)
                .collect();
            let shape: Vec<usize> = if frames == 1 {
                vec![x, y, z]
            } else {
                vec![frames, x, y, z]
            };
            Tensor::new(&shape, data).unwrap()
        };
        PreparedRecord {
            id: format!("r{salt}-{}", label.name()),
            label,
            amri: vol(1, salt),
            dti: vol(2, salt + 1.0),
            fmri: vol(2, salt + 2.0),
            features: (0..cfg.feature_dim)
                .map(|i| (i as f64 * 0.3 + salt).sin() + class_shift)
                .collect(),
        }
    }

    fn tiny_sets(cfg: &ModelConfig) -> (Vec<PreparedRecord>, Vec<PreparedRecord>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &label) in ClassLabel::ALL.iter().enumerate() {
            for j in 0..3 {
                train.push(record(cfg, label, (i * 3 + j) as f64 * 0.21));
            }
            test.push(record(cfg, label, 10.0 + i as f64 * 0.17));
        }
        (train, test)
    }

    #[test]
    fn cosine_hits_both_endpoints_exactly_and_never_increases() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 0.001);
        assert_eq!(cosine_lr(99, &cfg).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for epoch in 0..cfg.epochs {
            let lr = cosine_lr(epoch, &cfg).unwrap();
            assert!(lr <= prev, "lr increased at epoch {epoch}");
            prev = lr;
        }
        assert!(cosine_lr(100, &cfg).is_err());
    }

    #[test]
    fn cosine_midpoint_is_half_the_peak() {
        let cfg = TrainConfig {
            epochs: 101,
            ..TrainConfig::default()
        };
        assert!((cosine_lr(50, &cfg).unwrap() - 0.0005).abs() < 1e-12);
        let one = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &one).unwrap(), 0.001);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let id = store
            .register("p", Tensor::vector(vec![1.5, -2.5]).unwrap())
            .unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        for _ in 0..5 {
            adam_step(&mut store, &mut state, &cfg, 0.1).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.5, -2.5]);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // Constant gradient 1 at t=1: bias-corrected moments are both 1, so
        // the update is lr/(1+ε).
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(0.0)).unwrap();
        store.accumulate_grad(id, &[1.0]);
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        adam_step(&mut store, &mut state, &cfg, 0.01).unwrap();
        let expected = -0.01 / (1.0 + cfg.adam_eps);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::scalar(5.0)).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss, &mut store).unwrap();
            adam_step(&mut store, &mut state, &cfg, 0.1).unwrap();
            store.zero_grads();
        }
        assert!(store.value(id).data()[0].abs() < 0.1);
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("nmck-{}-{name}.bin", std::process::id()))
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly_and_bytes_are_stable() {
        let cfg = small_cfg();
        let (store, _) = NeuroMoeModel::build(&cfg, 7).unwrap();
        let path = tmp("roundtrip");
        save_checkpoint(&store, &cfg, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&store, &cfg, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());

        let (loaded, _) = load_checkpoint(&path, &cfg).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for id in store.ids() {
            let other = loaded.lookup(store.name(id)).unwrap();
            let a = store.value(id).data();
            let b = loaded.value(other).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_architecture_and_corruption() {
        let cfg = small_cfg();
        let (store, _) = NeuroMoeModel::build(&cfg, 7).unwrap();
        let path = tmp("reject");
        save_checkpoint(&store, &cfg, &path).unwrap();

        let mut other = cfg.clone();
        other.d_model = 16;
        other.ffn_hidden = 32;
        let err = load_checkpoint(&path, &other).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, &cfg).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn tiny_run_records_history_and_is_deterministic() {
        let cfg = small_cfg();
        let (train_set, test_set) = tiny_sets(&cfg);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            accumulation_steps: 2,
            ..TrainConfig::default()
        };
        let a = train(&train_set, &test_set, &cfg, &tcfg, 3).unwrap();
        let b = train(&train_set, &test_set, &cfg, &tcfg, 3).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.epochs.len(), 2);
        let best = &a.history.epochs[a.history.best_epoch];
        assert_eq!(best.test_accuracy, a.history.best_test_accuracy);
        assert!(a
            .history
            .epochs
            .iter()
            .all(|e| e.test_accuracy <= a.history.best_test_accuracy));
        for e in &a.history.epochs {
            assert!((e.mean_gate.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn best_parameters_reproduce_best_accuracy() {
        let cfg = small_cfg();
        let (train_set, test_set) = tiny_sets(&cfg);
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            accumulation_steps: 2,
            ..TrainConfig::default()
        };
        let out = train(&train_set, &test_set, &cfg, &tcfg, 5).unwrap();
        let metrics = evaluate(&out.model, &out.store, &test_set).unwrap();
        assert!((metrics.accuracy - out.history.best_test_accuracy).abs() < 1e-12);
    }

    #[test]
    fn uniform_mode_with_zero_lambda_never_updates_the_gate() {
        let mut cfg = small_cfg();
        cfg.gating = GatingMode::Uniform;
        let (train_set, test_set) = tiny_sets(&cfg);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            accumulation_steps: 2,
            lambda_balance: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&train_set, &test_set, &cfg, &tcfg, 1).unwrap();
        let (fresh, _) = NeuroMoeModel::build(&cfg, 1).unwrap();
        for id in out.store.ids() {
            let name = out.store.name(id);
            if name.starts_with("gate.") {
                let initial = fresh.value(fresh.lookup(name).unwrap());
                assert_eq!(out.store.value(id).data(), initial.data(), "{name}");
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        // Corrupt inputs cannot poison the loss (ReLU maps NaN to 0 before
        // the logits), so the guard's real job is optimizer divergence: a
        // pathological learning rate sends the parameters to ~1e300 after
        // one step and the next batch's loss is non-finite.
        let cfg = small_cfg();
        let (train_set, test_set) = tiny_sets(&cfg);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            accumulation_steps: 1,
            lr_init: 1e300,
            ..TrainConfig::default()
        };
        let err = train(&train_set, &test_set, &cfg, &tcfg, 0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)), "{msg}");
        assert!(msg.contains("epoch 0") && msg.contains("batch"), "{msg}");
    }

    #[test]
    fn empty_splits_are_rejected() {
        let cfg = small_cfg();
        let (train_set, test_set) = tiny_sets(&cfg);
        let tcfg = TrainConfig::default();
        assert!(train(&[], &test_set, &cfg, &tcfg, 0).is_err());
        assert!(train(&train_set, &[], &cfg, &tcfg, 0).is_err());
    }
}
