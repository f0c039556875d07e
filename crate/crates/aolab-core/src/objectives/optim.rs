//! AdamW and exponential moving averages of the weights.

use crate::error::CoreError;
use crate::model::Parameters;
use crate::tensor::Real;
use crate::Result;

/// AdamW with bias correction and decoupled weight decay. Decay applies
/// to matrix-shaped tensors only (embeddings, projections); gains,
/// biases, and other vectors are exempt, following the usual GPT
/// recipe.
pub struct AdamW<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    decayed: Vec<bool>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(
        params: &Parameters<T>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Result<AdamW<T>> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(CoreError::config("Adam betas must lie in [0, 1)"));
        }
        if eps <= 0.0 || weight_decay < 0.0 {
            return Err(CoreError::config("eps must be positive, decay nonnegative"));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut decayed = Vec::new();
        for (_, tensor) in params.tensors() {
            m.push(vec![T::zero(); tensor.numel()]);
            v.push(vec![T::zero(); tensor.numel()]);
            decayed.push(tensor.shape.len() >= 2);
        }
        Ok(AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m,
            v,
            decayed,
            t: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut Parameters<T>,
        grads: &Parameters<T>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grad_tensors = grads.tensors();
        for (idx, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
            let g = &grad_tensors[idx].1.data;
            if g.len() != tensor.data.len() {
                return Err(CoreError::config("gradient shape mismatch"));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let wd = if self.decayed[idx] { self.weight_decay } else { 0.0 };
            for i in 0..tensor.data.len() {
                let gi = g[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps)
                    + wd * tensor.data[i].as_f64();
                tensor.data[i] = T::from_f64(tensor.data[i].as_f64() - lr * update);
            }
        }
        Ok(())
    }
}

/// Shadow copy of the weights updated as
/// `shadow ← d·shadow + (1−d)·params` once per training step.
#[derive(Debug, Clone)]
pub struct EmaState<T> {
    /// Configured decay; constant over a run.
    pub decay: f64,
    pub shadow: Parameters<T>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Real> EmaState<T> {
    pub fn new(decay: f64, params: &Parameters<T>) -> Result<EmaState<T>> {
        if !(0.0..1.0).contains(&decay) {
            return Err(CoreError::config("EMA decay must lie in [0, 1)"));
        }
        Ok(EmaState {
            decay,
            shadow: params.clone(),
            step: 0,
        })
    }

    /// One recursion step with an explicit decay. The trainer passes a
    /// warmup-ramped decay here; [`ema_update`] passes the configured
    /// constant.
    pub fn update_with(&mut self, params: &Parameters<T>, decay: f64) -> Result<()> {
        let d = T::from_f64(decay);
        let omd = T::from_f64(1.0 - decay);
        let src = params.tensors();
        for (idx, (_, tensor)) in self.shadow.tensors_mut().into_iter().enumerate() {
            let p = &src[idx].1.data;
            if p.len() != tensor.data.len() {
                return Err(CoreError::config("EMA shape mismatch"));
            }
            for i in 0..tensor.data.len() {
                tensor.data[i] = d * tensor.data[i] + omd * p[i];
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Plain EMA update at the configured decay.
pub fn ema_update<T: Real>(ema: &mut EmaState<T>, params: &Parameters<T>) -> Result<()> {
    let d = ema.decay;
    ema.update_with(params, d)
}
