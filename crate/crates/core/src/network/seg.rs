use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Softmax over the channel axis of `(n, c, ...)` logits.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let m = (0..c).map(|k| x[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (x[at(k)].as_f64() - m).exp()).sum();
            for k in 0..c {
                out[at(k)] = T::cast((x[at(k)].as_f64() - m).exp() / z);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Per-voxel channel argmax of `(1, c, z, y, x)` scores; ties go to the
/// lowest channel.
pub fn argmax_channels<T: Real>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    let [_, c, z, y, x] = scores.dims5()?;
    let inner = z * y * x;
    let d = scores.data();
    Ok((0..inner)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * inner + i] > d[best * inner + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}
