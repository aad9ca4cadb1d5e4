//! SGD with heavy-ball momentum and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Param, Real, Tensor};

pub const DEFAULT_POLY_EXPONENT: f64 = 0.9;

/// `lr0 * (1 - epoch / max_epochs)^exponent`, zero from `max_epochs` on.
pub fn poly_lr(epoch: usize, max_epochs: usize, lr0: f64, exponent: f64) -> f64 {
    if max_epochs == 0 || epoch >= max_epochs {
        return 0.0;
    }
    lr0 * (1.0 - epoch as f64 / max_epochs as f64).powf(exponent)
}

/// Per-parameter velocity buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &[Param<T>], momentum: f64, nesterov: bool) -> Self {
        Sgd {
            momentum,
            nesterov,
            velocity: params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v <- momentum * v + g; p <- p - lr * v` (Nesterov: `p <- p - lr * (g + momentum * v)`).
    /// Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut [Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        let (mu, lr) = (T::cast(self.momentum), T::cast(lr));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.requires_grad {
                continue;
            }
            p.grad.check_same_shape(v)?;
            let (pv, g, vv) = (p.value.data_mut(), p.grad.data(), v.data_mut());
            for i in 0..pv.len() {
                vv[i] = mu * vv[i] + g[i];
                let d = if self.nesterov { g[i] + mu * vv[i] } else { vv[i] };
                pv[i] -= lr * d;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, names: &[String], seed: u64) -> Checkpoint {
        let tensors = names
            .iter()
            .zip(&self.velocity)
            .map(|(n, v)| (format!("velocity.{n}"), v.cast::<f32>()))
            .collect();
        Checkpoint::new(seed, tensors)
            .with_meta("momentum", self.momentum)
            .with_meta("nesterov", self.nesterov)
    }
}
