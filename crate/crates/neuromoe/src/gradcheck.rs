//! Finite-difference gradient verification.
//!
//! Central differences with configurable step, compared to analytic
//! gradients via a symmetric relative error. Public (not test-only) so
//! downstream users can validate custom compositions of tape ops.

use crate::autodiff::{ParamStore, Tensor};
use crate::Result;

/// Symmetric relative error `|a - b| / max(|a|, |b|, floor)` with a floor of
/// `1e-8` to keep near-zero gradients comparable.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-8)
}

/// Largest elementwise [`rel_error`] between two gradient buffers.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient buffers differ in length"
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradients of a scalar function of several tensors.
///
/// `f` must rebuild its computation from scratch on every call (e.g. by
/// recording a fresh tape) and return the scalar loss value. Returns one
/// gradient buffer per input, in order.
pub fn finite_diff<F>(f: &mut F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work)?;
            work[t].data_mut()[i] = orig - h;
            let down = f(&work)?;
            work[t].data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Central-difference gradients of a scalar function of every parameter in a
/// store. `f` is called with the perturbed store and must run a fresh
/// forward pass. Returns one gradient buffer per parameter in id order.
pub fn finite_diff_params<F>(store: &mut ParamStore, f: &mut F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut grads = Vec::with_capacity(ids.len());
    for &id in &ids {
        let numel = store.value(id).numel();
        let mut g = vec![0.0; numel];
        for i in 0..numel {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = f(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = f(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}
