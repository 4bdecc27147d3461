use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters for SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum SGD. Velocity buffers are matched to parameters by position,
/// so callers must pass the same parameter list, in the same order, on
/// every step.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`, then zeroes every gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::State(format!("parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::State(
                "parameter list changed between optimizer steps".into(),
            ));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.cfg;
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = momentum * *vel + g + weight_decay * *w;
                *w -= lr * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Functional form of a single momentum-SGD step over a fresh optimizer.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(SgdConfig {
        lr,
        momentum,
        weight_decay,
    })
    .step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).unwrap();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = param(1.5, 7.0);
        sgd_step(&mut [&mut p], 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(p.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn plain_step_by_hand() {
        let mut p = param(1.0, 2.0);
        sgd_step(&mut [&mut p], 0.1, 0.0, 0.0).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut opt = Sgd::new(SgdConfig {
            lr,
            momentum: mu,
            weight_decay: wd,
        });
        let mut p = param(1.0, 2.0);
        opt.step(&mut [&mut p]).unwrap();
        p.set_grad(vec![-0.5]).unwrap();
        opt.step(&mut [&mut p]).unwrap();

        let v1 = 2.0 + wd * 1.0;
        let w1 = 1.0 - lr * v1;
        let v2 = mu * v1 + -0.5 + wd * w1;
        let w2 = w1 - lr * v2;
        assert_eq!(p.data()[0], w2);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut p = Tensor::scalar(1.0).unwrap();
        assert!(matches!(
            sgd_step(&mut [&mut p], 0.1, 0.0, 0.0),
            Err(Error::State(_))
        ));
    }
}
