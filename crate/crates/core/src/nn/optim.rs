//! Adam and SGD with momentum.
//!
//! Optimizers only ever see the floating-point shadow parameters; effective
//! (binarized) weights are rebuilt from them on each forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    /// SGD with the momentum and weight decay used for the ResNet runs.
    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Optimizer plus its per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer<T = f32> {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    buffers: Vec<Moments<T>>,
}

#[derive(Debug, Clone)]
struct Moments<T> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, steps: 0, buffers: Vec::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every `(parameter, gradient)` pair.
    ///
    /// Moment buffers are allocated on the first call and must keep the same
    /// shapes afterwards.
    pub fn step<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a mut Tensor<T>, &'a Tensor<T>)>) -> Result<()> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        if self.buffers.is_empty() {
            self.buffers = pairs
                .iter()
                .map(|(p, _)| Moments {
                    first: Tensor::zeros(p.shape()),
                    second: matches!(self.kind, OptimizerKind::Adam { .. }).then(|| Tensor::zeros(p.shape())),
                })
                .collect();
        }
        if pairs.len() != self.buffers.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters, got {}",
                self.buffers.len(),
                pairs.len()
            )));
        }
        for (i, ((p, g), m)) in pairs.iter().zip(&self.buffers).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.first.shape() {
                return Err(Error::config(format!(
                    "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    m.first.shape()
                )));
            }
        }

        self.steps += 1;
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                for ((p, g), m) in pairs.into_iter().zip(&mut self.buffers) {
                    let v = m.second.as_mut().expect("adam second moment");
                    for (((w, &grad), m1), m2) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.first.data_mut()).zip(v.data_mut())
                    {
                        *m1 = b1 * *m1 + (T::one() - b1) * grad;
                        *m2 = b2 * *m2 + (T::one() - b2) * grad * grad;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                let (mu, wd) = (T::lit(momentum), T::lit(weight_decay));
                for ((p, g), m) in pairs.into_iter().zip(&mut self.buffers) {
                    for ((w, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(m.first.data_mut()) {
                        *vel = mu * *vel + grad + wd * *w;
                        *w -= lr * *vel;
                    }
                }
            }
        }
        Ok(())
    }
}
