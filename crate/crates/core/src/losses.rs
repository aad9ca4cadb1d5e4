//! Training objectives: L1, the anatomical feature loss computed through a
//! frozen extractor, their weighted sum, and softmax cross-entropy for the
//! segmentation network.

use crate::error::{Error, Result};
use crate::network::{ForwardPass, Network};
use crate::tensor::{Real, Tensor};

/// Weight of the L1 term in the combined objective.
pub const DEFAULT_LAMBDA_L1: f64 = 5.0;

/// Mean absolute error and its gradient (subgradient 0 at ties).
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.check_same_shape(target)?;
    let n = pred.numel() as f64;
    let inv = T::cast(1.0 / n);
    let mut sum = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.abs().as_f64();
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Mean absolute difference without a gradient.
pub fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
    Ok(s / a.numel() as f64)
}

/// A network whose intermediate activations serve as comparison features.
/// Implementations take `&self`: extraction never mutates the extractor.
pub trait FeatureExtractor<T: Real = f32> {
    type Trace;

    fn tap_count(&self) -> usize;

    fn trace(&self, x: &Tensor<T>) -> Result<Self::Trace>;

    fn taps<'a>(&self, trace: &'a Self::Trace) -> Vec<&'a Tensor<T>>;

    /// Gradient wrt the traced input given gradients wrt the taps.
    fn backward_input(&self, trace: &Self::Trace, tap_grads: &[Option<Tensor<T>>]) -> Result<Tensor<T>>;
}

impl<T: Real> FeatureExtractor<T> for Network<T> {
    type Trace = ForwardPass<T>;

    fn tap_count(&self) -> usize {
        Network::tap_count(self)
    }

    fn trace(&self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.forward_train(x)
    }

    fn taps<'a>(&self, trace: &'a ForwardPass<T>) -> Vec<&'a Tensor<T>> {
        trace.taps()
    }

    fn backward_input(&self, trace: &ForwardPass<T>, tap_grads: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        Network::backward_input(self, trace, None, tap_grads)
    }
}

/// Exposes the input itself as the only tap.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    type Trace = Tensor<T>;

    fn tap_count(&self) -> usize {
        1
    }

    fn trace(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn taps<'a>(&self, trace: &'a Tensor<T>) -> Vec<&'a Tensor<T>> {
        vec![trace]
    }

    fn backward_input(&self, trace: &Tensor<T>, tap_grads: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        Ok(tap_grads
            .first()
            .cloned()
            .flatten()
            .unwrap_or_else(|| trace.zeros_like()))
    }
}

/// Feature loss configuration.
#[derive(Debug, Clone)]
pub struct AfpConfig<'a, E> {
    pub extractor: &'a E,
    /// Which taps enter the loss; `N` is their count.
    pub tap_indices: Vec<usize>,
    pub lambda_l1: f64,
}

impl<'a, E> AfpConfig<'a, E> {
    /// Uses every tap of the extractor.
    pub fn all_taps<T: Real>(extractor: &'a E) -> Self
    where
        E: FeatureExtractor<T>,
    {
        AfpConfig {
            extractor,
            tap_indices: (0..extractor.tap_count()).collect(),
            lambda_l1: DEFAULT_LAMBDA_L1,
        }
    }

    fn validate<T: Real>(&self) -> Result<()>
    where
        E: FeatureExtractor<T>,
    {
        if self.tap_indices.is_empty() {
            return Err(Error::Precondition("feature loss needs at least one tap".into()));
        }
        let n = self.extractor.tap_count();
        if let Some(&bad) = self.tap_indices.iter().find(|&&i| i >= n) {
            return Err(Error::Precondition(format!("tap index {bad} out of range for {n} taps")));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Precondition(format!("lambda_l1 must be finite and >= 0, got {}", self.lambda_l1)));
        }
        Ok(())
    }
}

/// `(1/N) sum_i mean|phi_i(x) - phi_i(y)|` and its gradient wrt `x`. The
/// `y` branch is treated as a constant.
pub fn afp_loss<T: Real, E: FeatureExtractor<T>>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &AfpConfig<'_, E>,
) -> Result<(f64, Tensor<T>)> {
    cfg.validate()?;
    x.check_same_shape(y)?;
    let e = cfg.extractor;
    let tx = e.trace(x)?;
    let ty = e.trace(y)?;
    let (fx, fy) = (e.taps(&tx), e.taps(&ty));
    let n_layers = cfg.tap_indices.len() as f64;
    let mut tap_grads: Vec<Option<Tensor<T>>> = vec![None; e.tap_count()];
    let mut total = 0.0;
    for &i in &cfg.tap_indices {
        let (term, g) = l1_loss(fx[i], fy[i])?;
        total += term / n_layers;
        let g = g.scale(T::cast(1.0 / n_layers));
        match &mut tap_grads[i] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
    }
    let grad = e.backward_input(&tx, &tap_grads)?;
    Ok((total, grad))
}

/// Feature distance without a gradient.
pub fn afp_distance<T: Real, E: FeatureExtractor<T>>(x: &Tensor<T>, y: &Tensor<T>, cfg: &AfpConfig<'_, E>) -> Result<f64> {
    cfg.validate()?;
    x.check_same_shape(y)?;
    let e = cfg.extractor;
    let (tx, ty) = (e.trace(x)?, e.trace(y)?);
    let (fx, fy) = (e.taps(&tx), e.taps(&ty));
    let mut total = 0.0;
    for &i in &cfg.tap_indices {
        total += mean_abs_diff(fx[i], fy[i])?;
    }
    Ok(total / cfg.tap_indices.len() as f64)
}

#[derive(Debug, Clone)]
pub struct CombinedLoss<T: Real = f32> {
    pub total: f64,
    pub l1: f64,
    pub afp: f64,
    pub grad: Tensor<T>,
}

/// `lambda_l1 * L1 + AFP`.
pub fn combined_loss<T: Real, E: FeatureExtractor<T>>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &AfpConfig<'_, E>,
) -> Result<CombinedLoss<T>> {
    let (l1, g1) = l1_loss(pred, target)?;
    let (afp, mut grad) = afp_loss(pred, target, cfg)?;
    grad.add_assign(&g1.scale(T::cast(cfg.lambda_l1)))?;
    Ok(CombinedLoss {
        total: cfg.lambda_l1 * l1 + afp,
        l1,
        afp,
        grad,
    })
}

/// Mean softmax cross-entropy of `(n, c, ...)` logits against integer
/// labels stored as `(n, 1, ...)` floats, with its gradient.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s.len() < 3 || labels.shape()[0] != s[0] || labels.shape()[1] != 1 || labels.shape()[2..] != s[2..] {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {s:?}",
            labels.shape()
        )));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let count = (n * inner) as f64;
    let (x, lab) = (logits.data(), labels.data());
    let mut grad = vec![T::zero(); x.len()];
    let mut loss = 0.0;
    for b in 0..n {
        for i in 0..inner {
            let k_true = lab[b * inner + i].as_f64() as usize;
            if k_true >= c {
                return Err(Error::Precondition(format!("label {k_true} outside {c} classes")));
            }
            let at = |k: usize| (b * c + k) * inner + i;
            let m = (0..c).map(|k| x[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (x[at(k)].as_f64() - m).exp()).sum();
            loss += z.ln() + m - x[at(k_true)].as_f64();
            for k in 0..c {
                let p = (x[at(k)].as_f64() - m).exp() / z;
                let t = if k == k_true { 1.0 } else { 0.0 };
                grad[at(k)] = T::cast((p - t) / count);
            }
        }
    }
    Ok((loss / count, Tensor::new(s.to_vec(), grad)?))
}
