use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Float, ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Only parameters listed at construction are updated.
#[derive(Clone, Debug)]
pub struct Adam<F: Float> {
    cfg: AdamConfig,
    trainable: Vec<ParamId>,
    m: Vec<Option<Array2<F>>>,
    v: Vec<Option<Array2<F>>>,
    t: u64,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig, trainable: impl IntoIterator<Item = ParamId>) -> Self {
        let trainable: Vec<ParamId> = trainable.into_iter().collect();
        let n = trainable.iter().map(|id| id.index() + 1).max().unwrap_or(0);
        Self {
            cfg,
            trainable,
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let eps = F::lit(self.cfg.eps);
        let wd = F::lit(self.cfg.weight_decay);
        for &id in &self.trainable {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let m = self.m[id.index()].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id.index()].get_or_insert_with(|| Array2::zeros(g.dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g + wd * *p;
                *m = b1f * *m + one_b1 * g;
                *v = b2f * *v + one_b2 * g * g;
                *p = *p - step * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}
