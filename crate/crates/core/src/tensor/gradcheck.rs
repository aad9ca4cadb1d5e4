//! Central finite-difference gradient checks in f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            samples_per_tensor: 50,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shapes: Vec<String> = self
            .tensors
            .iter()
            .map(|t| format!("{}{:?}", t.name, t.shape))
            .collect();
        write!(
            f,
            "{} {} max_rel_err={:.3e} tol={:.0e} [{}]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            shapes.join(", ")
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Checks the gradients `f` reports against central differences.
///
/// `f` maps the inputs to a scalar loss and its analytic gradient with
/// respect to every input (same order and shapes).
pub fn gradcheck<F>(
    name: &str,
    inputs: Vec<(String, Tensor<f64>)>,
    f: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (names, mut tensors): (Vec<String>, Vec<Tensor<f64>>) = inputs.into_iter().unzip();
    let (_, analytic) = f(&tensors)?;
    if analytic.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "{name}: {} gradients for {} inputs",
            analytic.len(),
            tensors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(tensors.len());
    for t in 0..tensors.len() {
        analytic[t].check_same_shape(&tensors[t])?;
        let n = tensors[t].numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_tensor).into_vec()
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = tensors[t].data()[i];
            tensors[t].data_mut()[i] = orig + cfg.step;
            let (plus, _) = f(&tensors)?;
            tensors[t].data_mut()[i] = orig - cfg.step;
            let (minus, _) = f(&tensors)?;
            tensors[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic[t].data()[i], numeric, cfg.abs_floor);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        checks.push(TensorCheck {
            name: names[t].clone(),
            shape: tensors[t].shape().to_vec(),
            checked: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        tolerance: cfg.tolerance,
        max_rel_err: checks.iter().fold(0.0, |m, c| m.max(c.max_rel_err)),
        tensors: checks,
    })
}
