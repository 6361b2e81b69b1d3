//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            min_lr_ratio: 0.0,
        }
    }
}

/// Learning rate for 0-based `step`: linear ramp over `warmup` steps, then
/// half-cosine from `peak` to `peak * min_ratio` at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = peak * min_ratio;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Parameters with a single row (biases, norm affines, tokens) are exempt
/// from weight decay.
pub fn decays(shape: (usize, usize)) -> bool {
    shape.0 > 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if grads.grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1: T = c(1.0 - b1.powi(self.t as i32));
        let bc2: T = c(1.0 - b2.powi(self.t as i32));
        let (b1t, b2t): (T, T) = (c(b1), c(b2));
        let (one, eps, lr_t): (T, T, T) = (T::one(), c(self.cfg.eps), c(lr));
        let wd: T = c(lr * weight_decay);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(&grads.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = decays(p.shape());
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1t * *mv + (one - b1t) * gv;
                *vv = b2t * *vv + (one - b2t) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                if decay {
                    *pv = *pv - wd * *pv;
                }
                *pv = *pv - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// `m` then `v`, concatenated and widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        self.m
            .iter()
            .chain(&self.v)
            .flat_map(|t| t.data().iter().map(|x| x.as_f64()))
            .collect()
    }

    pub fn load_flat(&mut self, flat: &[f64], t: u64) -> Result<()> {
        let n: usize = self.m.iter().map(Tensor::len).sum::<usize>() * 2;
        if flat.len() != n {
            return Err(Error::Shape(format!("optimizer blob has {} values, expected {n}", flat.len())));
        }
        let mut off = 0;
        for tensor in self.m.iter_mut().chain(self.v.iter_mut()) {
            let len = tensor.len();
            for (d, &s) in tensor.data_mut().iter_mut().zip(&flat[off..off + len]) {
                *d = T::from_f64_lossy(s);
            }
            off += len;
        }
        self.t = t;
        Ok(())
    }
}
