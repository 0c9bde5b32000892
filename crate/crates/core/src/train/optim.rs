//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{load_tensors, named_tensors, tensors, zeros_like, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments shaped like the parameters, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<P> {
    pub config: AdamWConfig,
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: Parameters + Clone> AdamW<P> {
    pub fn new(params: &P, config: AdamWConfig) -> Self {
        Self {
            config,
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
        }
    }

    /// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
    /// Rejects the whole step, leaving all state untouched, if any gradient
    /// entry is non-finite.
    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        for (name, g) in named_tensors(grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let gs = tensors(grads);
        let mut ps = tensors(params);
        let mut ms = tensors(&self.m);
        let mut vs = tensors(&self.v);
        let names: Vec<String> = named_tensors(params).into_iter().map(|(n, _)| n).collect();
        if gs.len() != ps.len() || ms.len() != ps.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments for {} parameters and {} gradients",
                ms.len(),
                ps.len(),
                gs.len()
            )));
        }
        for (((p, g), m), name) in ps.iter().zip(&gs).zip(&ms).zip(&names) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape("adamw_step", format!("parameter {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in ps.iter_mut().zip(&gs).zip(&mut ms).zip(&mut vs) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + c.eps);
                pd[i] -= lr * update + lr * c.weight_decay * pd[i];
            }
        }
        load_tensors(params, &ps)?;
        load_tensors(&mut self.m, &ms)?;
        load_tensors(&mut self.v, &vs)?;
        Ok(())
    }
}

/// Linear warmup from `base / warmup`, then polynomial decay to zero at `total`.
pub fn poly_lr(iter: usize, base: f64, warmup: usize, total: usize, power: f64) -> f64 {
    if iter < warmup {
        return base * (iter + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return if iter < total { base } else { 0.0 };
    }
    let progress = ((iter - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * (1.0 - progress).powf(power)
}
