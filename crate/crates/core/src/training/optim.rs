use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: ParamSet<T>,
    v: ParamSet<T>,
    steps: i32,
    rejected: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: T) -> Self {
        Self::with_betas(params, T::c(0.9), T::c(0.999), T::c(1e-8), weight_decay)
    }

    pub fn with_betas(params: &ParamSet<T>, beta1: T, beta2: T, eps: T, weight_decay: T) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
            rejected: 0,
        }
    }

    /// Applied updates so far.
    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    /// Updates skipped because the gradient was not finite.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    /// One update with learning rate `lr`. Returns `false` (and leaves
    /// `params` untouched) when any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: T) -> Result<bool> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            let m = self.m.get(name)?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape())));
            }
        }
        if !grads.is_finite() {
            self.rejected += 1;
            return Ok(false);
        }
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let decay = T::one() - lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One-cycle learning rate: linear warmup from `peak / floor_div` to
/// `peak` at iteration `floor(warmup · total)`, then linear decay back to
/// `peak / floor_div` at the last iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub peak: f64,
    pub total: usize,
    pub warmup: f64,
    pub floor_div: f64,
}

impl OneCycle {
    pub fn new(peak: f64, total: usize) -> Self {
        OneCycle {
            peak,
            total,
            warmup: 0.05,
            floor_div: 25.0,
        }
    }

    pub fn peak_iteration(&self) -> usize {
        (self.warmup * self.total as f64).floor() as usize
    }

    pub fn lr(&self, iter: usize) -> f64 {
        let floor = self.peak / self.floor_div;
        let top = self.peak_iteration();
        let last = self.total.saturating_sub(1).max(top);
        if iter == top {
            self.peak
        } else if iter < top {
            floor + (self.peak - floor) * iter as f64 / top as f64
        } else if iter >= last {
            floor
        } else {
            self.peak - (self.peak - floor) * (iter - top) as f64 / (last - top) as f64
        }
    }
}
