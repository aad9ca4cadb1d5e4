use crate::error::{Error, Result};
use crate::volume::Volume;

/// Dynamic range for PSNR and SSIM: the span of the HU clip window.
pub const DYNAMIC_RANGE: f64 = 4095.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn pair<'a>(a: &'a Volume, b: &'a Volume) -> Result<(&'a [f32], &'a [f32])> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a.scalars()?, b.scalars()?))
}

/// Mean absolute difference, over `mask` voxels when given.
pub fn mae(pred: &Volume, reference: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    let (p, r) = pair(pred, reference)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    match mask {
        Some(m) => {
            if m.len() != p.len() {
                return Err(Error::Shape(format!("mask of {} for {} voxels", m.len(), p.len())));
            }
            for i in (0..p.len()).filter(|&i| m[i]) {
                sum += (p[i] as f64 - r[i] as f64).abs();
                n += 1;
            }
        }
        None => {
            sum = p.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
            n = p.len();
        }
    }
    if n == 0 {
        return Err(Error::Precondition("mask selects no voxels".into()));
    }
    Ok(sum / n as f64)
}

/// `10 log10(R^2 / MSE)` with the fixed range; `+inf` for identical inputs.
pub fn psnr(pred: &Volume, reference: &Volume) -> Result<f64> {
    let (p, r) = pair(pred, reference)?;
    let mse = p.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / p.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering along one axis.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = taps.len();
    let mut od = dims;
    od[axis] = dims[axis] - k + 1;
    let stride = [dims[1] * dims[2], dims[2], 1][axis];
    let mut out = Vec::with_capacity(od.iter().product());
    for z in 0..od[0] {
        for y in 0..od[1] {
            for x in 0..od[2] {
                let base = (z * dims[1] + y) * dims[2] + x;
                out.push((0..k).map(|t| taps[t] * data[base + t * stride]).sum());
            }
        }
    }
    (out, od)
}

fn blur(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let taps = gaussian_taps();
    let (a, d) = filter_axis(data, dims, 0, &taps);
    let (b, d) = filter_axis(&a, d, 1, &taps);
    filter_axis(&b, d, 2, &taps).0
}

/// Mean SSIM and mean contrast-structure term over valid windows.
fn ssim_terms(x: &[f64], y: &[f64], dims: [usize; 3]) -> Result<(f64, f64)> {
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::Precondition(format!(
            "SSIM needs every dim >= {SSIM_WINDOW}, got {dims:?}"
        )));
    }
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (blur(x, dims), blur(y, dims));
    let (exx, eyy, exy) = (blur(&xx, dims), blur(&yy, dims), blur(&xy, dims));
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = exx[i] - a * a;
        let vy = eyy[i] - b * b;
        let cov = exy[i] - a * b;
        let l = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        ssim += l * c;
        cs += c;
    }
    Ok((ssim / n, cs / n))
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&a| a as f64).collect()
}

/// Gaussian-windowed 3D SSIM, averaged over all valid window positions.
pub fn ssim(pred: &Volume, reference: &Volume) -> Result<f64> {
    let (p, r) = pair(pred, reference)?;
    Ok(ssim_terms(&as_f64(p), &as_f64(r), pred.dims())?.0)
}

/// Number of scales: the largest `s <= 5` with `min dim / 2^(s-1) >= 11`.
pub fn ms_ssim_scales(dims: [usize; 3]) -> usize {
    let m = *dims.iter().min().unwrap();
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&s| m >> (s - 1) >= SSIM_WINDOW)
        .last()
        .unwrap_or(0)
}

fn avg_pool2(data: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let od = dims.map(|d| d / 2);
    let mut out = Vec::with_capacity(od.iter().product());
    for z in 0..od[0] {
        for y in 0..od[1] {
            for x in 0..od[2] {
                let mut s = 0.0;
                for (dz, dy, dx) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                    s += data[((2 * z + dz) * dims[1] + 2 * y + dy) * dims[2] + 2 * x + dx];
                }
                out.push(s / 8.0);
            }
        }
    }
    (out, od)
}

/// Multi-scale SSIM with renormalized weights over the available scales.
/// With one scale this is exactly [`ssim`].
pub fn ms_ssim(pred: &Volume, reference: &Volume) -> Result<f64> {
    let (p, r) = pair(pred, reference)?;
    let scales = ms_ssim_scales(pred.dims());
    if scales == 0 {
        return Err(Error::Precondition(format!(
            "MS-SSIM needs every dim >= {SSIM_WINDOW}, got {:?}",
            pred.dims()
        )));
    }
    let (mut x, mut y, mut dims) = (as_f64(p), as_f64(r), pred.dims());
    if scales == 1 {
        return Ok(ssim_terms(&x, &y, dims)?.0);
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut out = 1.0;
    for (s, w) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (full, cs) = ssim_terms(&x, &y, dims)?;
        let term = if s + 1 == scales { full } else { cs };
        out *= term.max(0.0).powf(w / wsum);
        if s + 1 < scales {
            let (nx, nd) = avg_pool2(&x, dims);
            y = avg_pool2(&y, dims).0;
            x = nx;
            dims = nd;
        }
    }
    Ok(out)
}
