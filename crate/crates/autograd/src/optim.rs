use std::collections::HashMap;

use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::Element;

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// id and exposed for checkpointing so training is bit-exact resumable.
pub struct AdamW<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<ParamId, ArrayD<E>>,
    v: HashMap<ParamId, ArrayD<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. Parameters are visited in store order.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &Gradients<E>) {
        self.step += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let wd = E::from_f64(self.weight_decay);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);

        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let Some(g) = grads.of_param(id) else { continue };
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m * inv_bc1;
                    let vhat = *v * inv_bc2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }

    /// Moment buffers in a stable order, for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(ParamId, &ArrayD<E>, &ArrayD<E>)>) {
        let mut ids: Vec<ParamId> = self.m.keys().copied().collect();
        ids.sort();
        let rows = ids
            .into_iter()
            .map(|id| (id, &self.m[&id], &self.v[&id]))
            .collect();
        (self.step, rows)
    }

    pub fn import_state(&mut self, step: u64, rows: Vec<(ParamId, ArrayD<E>, ArrayD<E>)>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (id, m, v) in rows {
            self.m.insert(id, m);
            self.v.insert(id, v);
        }
    }
}
