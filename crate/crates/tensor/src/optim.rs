use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed group of parameters of one store.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    params: Vec<ParamId>,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    /// Frozen stores are rejected: their parameters never take optimizer steps.
    pub fn new(config: AdamConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Result<Self, TensorError> {
        if store.is_frozen() {
            return Err(TensorError::Frozen);
        }
        let m: Vec<_> = params.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        let v = m.clone();
        Ok(Adam { config, params, step: 0, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore moments and step counter (checkpoint resume).
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<(), TensorError> {
        for ((old, new_m), new_v) in self.m.iter().zip(&m).zip(&v) {
            if old.shape() != new_m.shape() || old.shape() != new_v.shape() {
                return Err(TensorError::Shape { expected: old.shape().to_vec(), actual: new_m.shape().to_vec() });
            }
        }
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(TensorError::Shape { expected: vec![self.m.len()], actual: vec![m.len()] });
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. Parameters of the group without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>) -> Result<(), TensorError> {
        if store.is_frozen() {
            return Err(TensorError::Frozen);
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2_sqrt = T::lit((1.0 - c.beta2.powi(self.step as i32)).sqrt());
        let step_size = T::lit(c.lr) / bias1;
        let eps = T::lit(c.eps);
        for (slot, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(&id) else { continue };
            let p = store.get_mut(id)?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape { expected: p.shape().to_vec(), actual: g.shape().to_vec() });
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() / bias2_sqrt + eps);
            }
        }
        Ok(())
    }
}
