//! Adaptive-moment optimizer with global-norm clipping.

use crate::numerics::Tensor;
use crate::params::{ParamGrads, ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every parameter of a store, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }

    /// Scales `grads` so their joint norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip(grads: &mut ParamGrads, max_norm: f64) -> f64 {
        let norm = grads.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            grads.scale(max_norm / norm);
        }
        norm
    }

    /// One update of the parameters in `trainable` that have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, trainable: &[ParamId], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for &id in trainable {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
                *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
                *pj -= lr * (*mj / bc1) / ((*vj / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}
