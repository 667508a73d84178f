//! Parameter initialization.
//!
//! Each parameter draws from its own RNG stream keyed by
//! `(seed, "init/<param name>")`, so initial values depend only on the seed
//! and the parameter's name — never on registration order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::rng;
use crate::Result;

/// Scale of the positional-table initialization.
const POS_TABLE_SD: f64 = 0.02;

/// Xavier/Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub(crate) fn xavier(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<ParamId> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng::stream(seed, &format!("init/{name}"));
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    store.register(name, Tensor::matrix(fan_in, fan_out, data)?)
}

/// Zero bias vector `[n]`.
pub(crate) fn zeros(store: &mut ParamStore, name: &str, n: usize) -> Result<ParamId> {
    store.register(name, Tensor::vector(vec![0.0; n])?)
}

/// Constant-one vector `[n]` (layer-norm gain).
pub(crate) fn ones(store: &mut ParamStore, name: &str, n: usize) -> Result<ParamId> {
    store.register(name, Tensor::vector(vec![1.0; n])?)
}

/// Gaussian positional table `[rows, cols]` with small standard deviation.
pub(crate) fn pos_table(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<ParamId> {
    let normal = Normal::new(0.0, POS_TABLE_SD).expect("valid sd");
    let mut rng = rng::stream(seed, &format!("init/{name}"));
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    store.register(name, Tensor::matrix(rows, cols, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_respects_limit_and_name_keying() {
        let mut store = ParamStore::new();
        let a = xavier(&mut store, "a", 8, 8, 7).unwrap();
        let limit = (6.0 / 16.0f64).sqrt();
        assert!(store.value(a).data().iter().all(|v| v.abs() < limit));

        // Same name + seed reproduces values in a fresh store; different
        // name gives a different draw.
        let mut other = ParamStore::new();
        let a2 = xavier(&mut other, "a", 8, 8, 7).unwrap();
        let b = xavier(&mut other, "b", 8, 8, 7).unwrap();
        assert_eq!(store.value(a).data(), other.value(a2).data());
        assert_ne!(store.value(a).data(), other.value(b).data());
    }
}
