use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Per-parameter gradient accumulator indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct GradBuffer<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> GradBuffer<F> {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: usize, g: Array2<F>) {
        match &mut self.grads[id] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        let c = F::lit(c);
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter so frozen parameters carry no optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Option<Array2<F>>>,
    pub v: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &GradBuffer<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = F::lit(lr * c2.sqrt() / c1);
        let eps = F::lit(self.cfg.eps * c2.sqrt());
        let (fb1, fb2) = (F::lit(b1), F::lit(b2));
        let (ob1, ob2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));

        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            Zip::from(store.get_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &gv| {
                    *m = fb1 * *m + ob1 * gv;
                    *v = fb2 * *v + ob2 * gv * gv;
                    *p -= step_size * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", array![[1.0, -1.0]]);
        let mut grads = GradBuffer::new(1);
        grads.accumulate(id.0, array![[0.5, -2.0]]);
        let mut adam = Adam::new(AdamConfig::default(), 1);
        adam.update(&mut store, &grads, 0.1);
        let p = store.get(id);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("frozen.a", array![[1.0]]);
        let b = store.add("live.b", array![[1.0]]);
        store.set_trainable_prefix("frozen.", false);
        let mut grads = GradBuffer::new(2);
        grads.accumulate(a.0, array![[1.0]]);
        grads.accumulate(b.0, array![[1.0]]);
        let mut adam = Adam::new(AdamConfig::default(), 2);
        adam.update(&mut store, &grads, 0.01);
        assert_eq!(store.get(a)[[0, 0]], 1.0);
        assert!(store.get(b)[[0, 0]] < 1.0);
        assert!(adam.m[a.0].is_none());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", array![[3.0, -2.0]]);
        let mut adam = Adam::new(AdamConfig::default(), 1);
        for _ in 0..2000 {
            let mut grads = GradBuffer::new(1);
            grads.accumulate(id.0, store.get(id).mapv(|v| 2.0 * v));
            adam.update(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }
}
