//! Instance normalization: per sample, per channel standardization followed
//! by a per-channel affine map.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct InstanceNormCache<T: Real> {
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` per (batch, channel) group.
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("instance norm needs (n, c, ...) input, got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "instance norm affine params must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if s < 2 {
        return Err(Error::Shape("instance norm needs at least 2 voxels per group".into()));
    }
    Ok((n, c, s))
}

pub fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, InstanceNormCache<T>)> {
    let (n, c, s) = check(x, gamma, beta)?;
    let xs = x.data();
    let mut y = vec![T::zero(); xs.len()];
    let mut xhat = vec![T::zero(); xs.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for g in 0..n * c {
        let ch = g % c;
        let group = &xs[g * s..(g + 1) * s];
        let mean = group.iter().map(|v| v.as_f64()).sum::<f64>() / s as f64;
        let var = group
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / s as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let (gm, bt) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
        for i in 0..s {
            let h = (group[i].as_f64() - mean) * istd;
            xhat[g * s + i] = T::cast(h);
            y[g * s + i] = T::cast(gm * h + bt);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        InstanceNormCache {
            normalized: Tensor::new(shape, xhat)?,
            inv_std,
        },
    ))
}

pub fn instance_norm_backward<T: Real>(
    cache: &InstanceNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let xhat = &cache.normalized;
    xhat.check_same_shape(grad_out)?;
    let shape = xhat.shape();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let (hs, gy) = (xhat.data(), grad_out.data());
    let mut gx = vec![T::zero(); hs.len()];
    let mut gg = vec![0.0f64; c];
    let mut gb = vec![0.0f64; c];
    for g in 0..n * c {
        let ch = g % c;
        let gm = gamma.data()[ch].as_f64();
        let (mut sum_dy, mut sum_dy_h) = (0.0f64, 0.0f64);
        for i in g * s..(g + 1) * s {
            let dy = gy[i].as_f64();
            sum_dy += dy;
            sum_dy_h += dy * hs[i].as_f64();
        }
        gb[ch] += sum_dy;
        gg[ch] += sum_dy_h;
        // dx = gamma * istd * (dy - mean(dy) - xhat * mean(dy * xhat))
        let (mean_dy, mean_dy_h) = (sum_dy / s as f64, sum_dy_h / s as f64);
        let scale = gm * cache.inv_std[g];
        for i in g * s..(g + 1) * s {
            gx[i] = T::cast(scale * (gy[i].as_f64() - mean_dy - hs[i].as_f64() * mean_dy_h));
        }
    }
    Ok(NormGrads {
        input: Tensor::new(shape.to_vec(), gx)?,
        gamma: Tensor::new([c], gg.into_iter().map(T::cast).collect())?,
        beta: Tensor::new([c], gb.into_iter().map(T::cast).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: &[f32]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
        (m, var.sqrt())
    }

    #[test]
    fn standardizes_each_channel() {
        let x = Tensor::<f32>::from_fn([2, 3, 3, 4, 5], |i| ((i * 7919) % 101) as f32 * 0.3 - 4.0);
        let (y, _) = instance_norm_forward(&x, &Tensor::full([3], 1.0), &Tensor::zeros([3]), 1e-5).unwrap();
        for g in y.data().chunks(60) {
            let (m, s) = stats(g);
            assert!(m.abs() < 1e-5);
            assert!((s - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn affine_shifts_and_scales() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4, 4], |i| (i as f32 * 0.37).sin() * 10.0);
        let (y, _) = instance_norm_forward(&x, &Tensor::full([1], 2.0), &Tensor::full([1], 3.0), 1e-5).unwrap();
        let (m, s) = stats(y.data());
        assert!((m - 3.0).abs() < 1e-5);
        assert!((s - 2.0).abs() < 1e-4);
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f32>::full([1, 2, 2, 2, 2], 4.0);
        let (y, _) = instance_norm_forward(&x, &Tensor::full([2], 5.0), &Tensor::full([2], -1.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == -1.0));
    }
}
