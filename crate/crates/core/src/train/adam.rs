//! Adam with bias correction.

use crate::error::{param_err, Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every trainable entry of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of steps taken.
    pub t: u64,
    /// `(m, v)` per store entry; `None` for buffers.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .entries()
            .iter()
            .map(|e| {
                (e.kind == ParamKind::Trainable)
                    .then(|| (Tensor::zeros(e.value.shape()), Tensor::zeros(e.value.shape())))
            })
            .collect();
        Self { t: 0, moments }
    }
}

/// One Adam update. Parameters without a gradient are left alone.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient aborts the step with parameters and state untouched.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(param_err!(
            "optimizer state covers {} entries, store has {}",
            state.moments.len(),
            store.len()
        ));
    }
    for (id, g) in grads {
        let e = store.entry(*id);
        if g.shape() != e.value.shape() {
            return Err(param_err!("gradient for {} has shape {:?}", e.name, g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", e.name)));
        }
        if state.moments[id.index()].is_none() {
            return Err(param_err!("{} is not trainable", e.name));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ib1, ib2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step = T::lit(cfg.lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(cfg.eps);
    for (id, g) in grads {
        let (m, v) = state.moments[id.index()].as_mut().expect("checked above");
        let p = store.value_mut(*id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *m = b1 * *m + ib1 * g;
            *v = b2 * *v + ib2 * g * g;
            *p = *p - step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}
