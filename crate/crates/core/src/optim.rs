//! Local optimisers. State lives for one round of local training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `theta <- theta - eta * v` with `v <- momentum * v + grad`; plain SGD at zero momentum.
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
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

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Config(format!("invalid Adam settings beta1={beta1} beta2={beta2} eps={eps}")))
            }
            _ => Ok(()),
        }
    }
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    steps: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    fn init_state(&mut self, params: &ModelParams<T>) {
        if self.m.is_empty() {
            for (_, t) in params.entries() {
                self.m.push(vec![T::zero(); t.len()]);
                self.v.push(vec![T::zero(); t.len()]);
            }
        }
    }

    fn momentum_step(&mut self, params: &mut ModelParams<T>, momentum: f64) -> Result<()> {
        self.init_state(params);
        let (mu, rate) = (T::lit(momentum), T::lit(self.lr));
        for (i, t) in params.tensors_mut().enumerate() {
            let grad = t.grad().ok_or_else(|| Error::Usage("optimizer step without gradients".into()))?.to_vec();
            let v = &mut self.m[i];
            for ((p, g), vel) in t.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                *vel = mu * *vel + g;
                *p = *p - rate * *vel;
            }
            t.zero_grad();
        }
        Ok(())
    }

    /// Applies one update from the gradients stored on `params`, then clears them.
    pub fn step(&mut self, params: &mut ModelParams<T>) -> Result<()> {
        let (beta1, beta2, eps) = match self.kind {
            OptimizerKind::Sgd { momentum: 0.0 } => return params.sgd_step(self.lr),
            OptimizerKind::Sgd { momentum } => return self.momentum_step(params, momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
        };
        self.init_state(params);
        self.steps += 1;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step = T::lit(self.lr / c1);
        let vscale = T::lit(1.0 / c2);
        for (i, t) in params.tensors_mut().enumerate() {
            let grad = t.grad().ok_or_else(|| Error::Usage("optimizer step without gradients".into()))?.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                *p = *p - step * m[j] / ((v[j] * vscale).sqrt() + e);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ModelParams::new(vec![("w".into(), Tensor::from_slice(&[1.0f64, -2.0]).with_requires_grad(true))]);
        p.tensors_mut().next().unwrap().accumulate_grad(&[0.5, -3.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        opt.step(&mut p).unwrap();
        let w = p.flatten();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn sgd_matches_plain_step() {
        let mut p = ModelParams::new(vec![("w".into(), Tensor::from_slice(&[1.0f64]).with_requires_grad(true))]);
        p.tensors_mut().next().unwrap().accumulate_grad(&[2.0]);
        Optimizer::new(OptimizerKind::default(), 0.25).step(&mut p).unwrap();
        assert_eq!(p.flatten(), vec![0.5]);
    }
}
