use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::config(format!("unknown optimizer `{s}` (sgd, adam)"))),
        }
    }
}

/// Learning-rate schedule over 1-based steps: a constant `lr` through
/// `warmup`, then `lr * sqrt(warmup / t)` when `sqrt_decay` is set, and
/// `tail_lr` for the last `tail_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup: usize,
    pub sqrt_decay: bool,
    pub total: usize,
    pub tail_steps: usize,
    pub tail_lr: f64,
}

impl Schedule {
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.tail_steps > 0 && t + self.tail_steps > self.total {
            return self.tail_lr;
        }
        let w = self.warmup.max(1);
        if !self.sqrt_decay || t <= w {
            self.lr
        } else {
            self.lr * (w as f64 / t as f64).sqrt()
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

pub struct Optimizer<T> {
    kind: OptimizerKind,
    eps: f64,
    m: ParamSet<T>,
    v: ParamSet<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParamSet<T>) -> Self {
        Self::with_eps(kind, params, 1e-8)
    }

    /// `eps` is Adam's denominator floor; it is unused by SGD.
    pub fn with_eps(kind: OptimizerKind, params: &ParamSet<T>, eps: f64) -> Self {
        Optimizer { kind, eps, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// Applies one update. Gradients are rescaled to global norm `clip`
    /// first when `clip > 0`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &mut ParamSet<T>, lr: f64, clip: f64) -> Result<()> {
        let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient norm at update {}", self.t + 1)));
        }
        if clip > 0.0 && norm > clip {
            grads.scale(c(clip / norm));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr: T = c(lr);
                for (p, (_, g)) in params.tensors_mut().zip(grads.iter()) {
                    p.scaled_add(-lr, g);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2): (T, T) = (c(BETA1), c(BETA2));
                let step: T = c(lr * (1.0 - BETA2.powi(self.t)).sqrt() / (1.0 - BETA1.powi(self.t)));
                let eps: T = c(self.eps);
                let one = T::one();
                for (i, p) in params.tensors_mut().enumerate() {
                    let g = grads.get(i);
                    let m = self.m.get_mut(i);
                    m.zip_mut_with(g, |m, &g| *m = b1 * *m + (one - b1) * g);
                    let v = self.v.get_mut(i);
                    v.zip_mut_with(g, |v, &g| *v = b2 * *v + (one - b2) * g * g);
                    let (m, v) = (self.m.get(i), self.v.get(i));
                    ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| *p -= step * m / (v.sqrt() + eps));
                }
            }
        }
        Ok(())
    }
}
