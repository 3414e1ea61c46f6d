//! Finite-difference gradient verification helpers.

use crate::params::{ParamId, ParamStore};
use crate::Element;

/// Central-difference derivative of `loss_fn` with respect to one flat
/// element of a stored parameter.
pub fn numeric_grad<E, F>(
    store: &mut ParamStore<E>,
    id: ParamId,
    flat_index: usize,
    eps: f64,
    loss_fn: &F,
) -> f64
where
    E: Element,
    F: Fn(&ParamStore<E>) -> f64,
{
    let original = store.value(id).as_slice().unwrap()[flat_index];
    let e = E::from_f64(eps);

    store.value_mut(id).as_slice_mut().unwrap()[flat_index] = original + e;
    let plus = loss_fn(store);
    store.value_mut(id).as_slice_mut().unwrap()[flat_index] = original - e;
    let minus = loss_fn(store);
    store.value_mut(id).as_slice_mut().unwrap()[flat_index] = original;

    (plus - minus) / (2.0 * eps)
}

/// Relative error between analytic and numeric derivatives, guarded for
/// near-zero denominators.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-12 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}
