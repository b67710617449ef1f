use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Array, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Array<T>>,
    pub second: Vec<Array<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Array<T>]) -> Self {
        Self {
            first: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Array<T>], grads: &[Array<T>], cfg: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::Contract(format!(
                    "adam: slot {i} param {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let bc1 = T::from_f64(1.0 - num_traits::Float::powi(cfg.beta1, t));
        let bc2 = T::from_f64(1.0 - num_traits::Float::powi(cfg.beta2, t));
        let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
