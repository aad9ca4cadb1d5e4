//! Separable trilinear 2x upsampling (half-pixel centers, edge clamped) and
//! its exact adjoint.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Source taps for output index `i` along an axis of input length `d`.
#[inline]
fn taps(i: usize, d: usize) -> [(usize, f64); 2] {
    let j = i / 2;
    if i % 2 == 0 {
        [(j.saturating_sub(1), 0.25), (j, 0.75)]
    } else {
        [(j, 0.75), ((j + 1).min(d - 1), 0.25)]
    }
}

/// Views `shape` as `[outer, len(axis), inner]`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn upsample_axis<T: Real>(data: &[T], shape: &[usize], axis: usize) -> (Vec<T>, Vec<usize>) {
    let (outer, d, inner) = split(shape, axis);
    let out_d = 2 * d;
    let mut out = vec![T::zero(); outer * out_d * inner];
    for o in 0..outer {
        for i in 0..out_d {
            let [(s0, w0), (s1, w1)] = taps(i, d);
            let (w0, w1) = (T::cast(w0), T::cast(w1));
            let dst = &mut out[(o * out_d + i) * inner..(o * out_d + i + 1) * inner];
            let a = &data[(o * d + s0) * inner..(o * d + s0 + 1) * inner];
            let b = &data[(o * d + s1) * inner..(o * d + s1 + 1) * inner];
            for r in 0..inner {
                dst[r] = w0 * a[r] + w1 * b[r];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = out_d;
    (out, new_shape)
}

fn upsample_axis_adjoint<T: Real>(grad: &[T], shape: &[usize], axis: usize) -> (Vec<T>, Vec<usize>) {
    let (outer, out_d, inner) = split(shape, axis);
    let d = out_d / 2;
    let mut out = vec![T::zero(); outer * d * inner];
    for o in 0..outer {
        for i in 0..out_d {
            let [(s0, w0), (s1, w1)] = taps(i, d);
            let (w0, w1) = (T::cast(w0), T::cast(w1));
            let src = &grad[(o * out_d + i) * inner..(o * out_d + i + 1) * inner];
            for r in 0..inner {
                out[(o * d + s0) * inner + r] += w0 * src[r];
            }
            for r in 0..inner {
                out[(o * d + s1) * inner + r] += w1 * src[r];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = d;
    (out, new_shape)
}

/// Doubles every spatial dim of a `(n, c, z, y, x)` tensor.
pub fn trilinear_upsample2x_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.dims5()?;
    let (mut data, mut shape) = (x.data().to_vec(), x.shape().to_vec());
    for axis in [4, 3, 2] {
        (data, shape) = upsample_axis(&data, &shape, axis);
    }
    Tensor::new(shape, data)
}

pub fn trilinear_upsample2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = grad_out.dims5()?;
    if dims[2..].iter().any(|d| d % 2 != 0) {
        return Err(Error::Shape(format!("upsample grad has odd spatial dims {dims:?}")));
    }
    let (mut data, mut shape) = (grad_out.data().to_vec(), grad_out.shape().to_vec());
    for axis in [2, 3, 4] {
        (data, shape) = upsample_axis_adjoint(&data, &shape, axis);
    }
    Tensor::new(shape, data)
}
