//! Elementwise addition and channel concatenation.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Residual addition. The backward pass routes the incoming gradient
/// unchanged to both operands.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Joins `(n, ca, ...)` and `(n, cb, ...)` into `(n, ca + cb, ...)`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
    }
    let n = sa[0];
    let per_a = a.numel() / n;
    let per_b = b.numel() / n;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * per_a..(i + 1) * per_a]);
        data.extend_from_slice(&b.data()[i * per_b..(i + 1) * per_b]);
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    Tensor::new(shape, data)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = t.shape();
    if s.len() < 2 || ca == 0 || ca >= s[1] {
        return Err(Error::Shape(format!("cannot split {s:?} at channel {ca}")));
    }
    let n = s[0];
    let inner: usize = s[2..].iter().product();
    let cb = s[1] - ca;
    let mut a = Vec::with_capacity(n * ca * inner);
    let mut b = Vec::with_capacity(n * cb * inner);
    for i in 0..n {
        let base = i * s[1] * inner;
        a.extend_from_slice(&t.data()[base..base + ca * inner]);
        b.extend_from_slice(&t.data()[base + ca * inner..base + s[1] * inner]);
    }
    let mut sa = s.to_vec();
    sa[1] = ca;
    let mut sb = s.to_vec();
    sb[1] = cb;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_shapes_and_split_inverse() {
        let a = Tensor::<f32>::from_fn([2, 2, 2, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 2, 2, 2], |i| -(i as f32));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2, 2, 2]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros([1, 1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 1, 2, 2, 3]);
        assert!(concat_channels(&a, &b).is_err());
    }
}
