use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

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
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T: Float> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &[Tensor<T>]) -> Self {
        AdamW {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// Restores saved moments after checking their shapes.
    pub fn from_state(cfg: AdamWConfig, params: &[Tensor<T>], m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: u64) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer state has {}/{} moments for {} parameters",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for ((p, a), b) in params.iter().zip(&m).zip(&v) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adamw_state",
                    lhs: p.shape().to_vec(),
                    rhs: a.shape().to_vec(),
                });
            }
        }
        Ok(AdamW { cfg, m, v, t })
    }

    /// One update: `θ ← θ − lr·(m̂/(√v̂ + eps) + λθ)`, with `λ = 0` where
    /// `decay[i]` is false.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], decay: &[bool], lr: f64) -> Result<()> {
        if grads.len() != params.len() || decay.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, theta) in params[i].data_mut().iter_mut().enumerate() {
                let g = grads[i][j].as_f64();
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * g * g;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let th = theta.as_f64();
                let update = (mj / bc1) / ((vj / bc2).sqrt() + c.eps) + wd * th;
                *theta = T::of(th - lr * update);
            }
        }
        Ok(())
    }

    /// Steps a parameter store with its per-parameter decay flags.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        let decay: Vec<bool> = store.specs().iter().map(|s| s.decay).collect();
        self.step(store.tensors_mut(), grads, &decay, lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr0·½(1 + cos(π·t/T))`.
    Cosine { lr0: f64 },
    /// `lr0·gamma^k` after `k` milestones have passed.
    Step {
        lr0: f64,
        milestones: Vec<u64>,
        #[serde(default = "tenth")]
        gamma: f64,
    },
}

fn tenth() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::Cosine { lr0 } => {
                if total == 0 {
                    return *lr0;
                }
                let frac = t.min(total) as f64 / total as f64;
                lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Step { lr0, milestones, gamma } => {
                lr0 * gamma.powi(milestones.iter().filter(|&&m| t >= m).count() as i32)
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}
