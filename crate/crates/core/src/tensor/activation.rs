use super::{Real, Tensor};
use crate::error::Result;

pub const DEFAULT_SLOPE: f64 = 0.01;

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::cast(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient wrt the input. `reference` may be the forward input or output:
/// both share the sign pattern for a positive slope.
pub fn leaky_relu_backward<T: Real>(reference: &Tensor<T>, grad_out: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    reference.check_same_shape(grad_out)?;
    let s = T::cast(slope);
    let data = reference
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&r, &g)| if r > T::zero() { g } else { g * s })
        .collect();
    Tensor::new(reference.shape().to_vec(), data)
}
