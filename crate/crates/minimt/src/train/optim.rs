//! Optimizers and the warmup/inverse-square-root learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// `scale · dim^(-1/2) · min(step^(-1/2), step · warmup^(-3/2))`:
/// linear growth over the warmup steps, then inverse-square-root decay.
/// Continuous at `step == warmup` where both terms coincide.
pub fn lr_schedule(step: u64, warmup: u64, model_dim: usize, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (model_dim as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5))
}

/// Schedule parameters carried inside an Adam optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup: u64,
    pub model_dim: usize,
    pub scale: f64,
}

impl Schedule {
    pub fn rate(&self, step: u64) -> f64 {
        lr_schedule(step, self.warmup, self.model_dim, self.scale)
    }
}

/// Optimizer family and its hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adagrad { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, schedule: Option<Schedule> },
}

impl OptimizerKind {
    /// Adagrad with the standard initial learning rate for recurrent runs.
    pub fn default_adagrad() -> Self {
        OptimizerKind::Adagrad { lr: 0.01 }
    }

    /// Adam under the warmup schedule used for transformer runs.
    pub fn scheduled_adam(warmup: u64, model_dim: usize, scale: f64) -> Self {
        OptimizerKind::Adam {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Some(Schedule { warmup, model_dim, scale }),
        }
    }

    /// Adam at a fixed learning rate.
    pub fn fixed_adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule: None }
    }
}

/// Per-parameter accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Adagrad: squared-gradient sums. Adam: first moments.
    pub accum_m: BTreeMap<String, Tensor<f32>>,
    /// Adam only: second moments.
    pub accum_v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState { kind, accum_m: BTreeMap::new(), accum_v: BTreeMap::new(), step: 0 }
    }

    /// Apply one update. Returns the learning rate that was used.
    pub fn apply(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<f64> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(Error::Contract(format!(
                        "gradient shape {:?} does not match parameter '{name}' {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => {
                    return Err(Error::Contract(format!("missing gradient for '{name}'")))
                }
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adagrad { lr } => {
                let eps = 1e-8f64;
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    let acc = self
                        .accum_m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((w, &gr), a) in
                        p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut())
                    {
                        *a += gr * gr;
                        let update = lr * gr as f64 / ((*a as f64 + eps).sqrt());
                        *w -= update as f32;
                    }
                }
                Ok(lr)
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps, schedule } => {
                let rate = schedule.map_or(lr, |s| s.rate(self.step));
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    let m = self
                        .accum_m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self
                        .accum_v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for (((w, &gr), mm), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gr = gr as f64;
                        let m_new = beta1 * *mm as f64 + (1.0 - beta1) * gr;
                        let v_new = beta2 * *vv as f64 + (1.0 - beta2) * gr * gr;
                        *mm = m_new as f32;
                        *vv = v_new as f32;
                        let m_hat = m_new / bc1;
                        let v_hat = v_new / bc2;
                        *w -= (rate * m_hat / (v_hat.sqrt() + eps)) as f32;
                    }
                }
                Ok(rate)
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let mut sq = 0f64;
    for g in grads.values() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
