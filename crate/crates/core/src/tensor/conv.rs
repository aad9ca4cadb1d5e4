//! 3D cross-correlation and its transpose, lowered to GEMM via im2col.
//!
//! Work is split into tasks of (batch item, column chunk) with a chunk size
//! that does not depend on the thread count. Partial results are merged in
//! task order, so outputs are bitwise identical for any number of threads.

use rayon::prelude::*;

use super::gemm::gemm;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output positions handled by one task.
const COL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(Error::Shape("kernel and stride must be positive".into()));
            }
            let padded = in_dims[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(Error::Shape(format!(
                    "kernel {:?} larger than padded input {in_dims:?}",
                    kernel
                )));
            }
            out_dims[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeometry {
            in_dims,
            kernel,
            stride,
            pad,
            out_dims,
        })
    }

    /// Geometry of a transposed convolution whose input has `small` spatial
    /// dims: the returned `in_dims` are the (large) transposed-conv output.
    pub fn transposed(
        small: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (small[a] - 1) * stride[a] + kernel[a];
            if full <= 2 * pad[a] {
                return Err(Error::Shape("transposed conv padding too large".into()));
            }
            big[a] = full - 2 * pad[a];
        }
        let g = Self::new(big, kernel, stride, pad)?;
        debug_assert_eq!(g.out_dims, small);
        Ok(g)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    fn chunk(&self) -> usize {
        if self.is_pointwise() {
            self.out_len()
        } else {
            COL_CHUNK.min(self.out_len())
        }
    }

    /// Visits each contiguous x-run of output positions in `[p0, p0+len)`
    /// for kernel tap `(a, b, e)`: calls `f(j, run, Some((in_row_base, ix0)))`
    /// where the run is in-bounds along z/y, or `None` where it is not.
    #[inline]
    fn for_runs(
        &self,
        p0: usize,
        len: usize,
        tap: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, Option<usize>),
    ) {
        let [_, oh_n, ow_n] = self.out_dims;
        let [id_n, ih_n, iw_n] = self.in_dims;
        let mut p = p0;
        let mut j = 0;
        while j < len {
            let od = p / (oh_n * ow_n);
            let oh = (p / ow_n) % oh_n;
            let ow0 = p % ow_n;
            let run = (ow_n - ow0).min(len - j);
            let iz = (od * self.stride[0] + tap[0]) as isize - self.pad[0] as isize;
            let iy = (oh * self.stride[1] + tap[1]) as isize - self.pad[1] as isize;
            let base = if iz >= 0 && (iz as usize) < id_n && iy >= 0 && (iy as usize) < ih_n {
                Some((iz as usize * ih_n + iy as usize) * iw_n)
            } else {
                None
            };
            f(j, run, ow0, base);
            p += run;
            j += run;
        }
    }

    /// Input x index for output column `ow` and kernel tap `e`, if in-bounds.
    #[inline]
    fn ix(&self, ow: usize, e: usize) -> Option<usize> {
        let ix = (ow * self.stride[2] + e) as isize - self.pad[2] as isize;
        (ix >= 0 && (ix as usize) < self.in_dims[2]).then_some(ix as usize)
    }

    /// Gathers the `[channels * kvol, len]` patch matrix for output
    /// positions `[p0, p0 + len)`.
    fn im2col<T: Real>(&self, x: &[T], channels: usize, p0: usize, len: usize, cols: &mut [T]) {
        let in_len = self.in_len();
        let [kz, ky, kx] = self.kernel;
        let mut row = 0;
        for c in 0..channels {
            let src = &x[c * in_len..(c + 1) * in_len];
            for a in 0..kz {
                for b in 0..ky {
                    for e in 0..kx {
                        let dst = &mut cols[row * len..(row + 1) * len];
                        self.for_runs(p0, len, [a, b, e], |j, run, ow0, base| match base {
                            None => dst[j..j + run].fill(T::zero()),
                            Some(base) => {
                                if self.stride[2] == 1 {
                                    for t in 0..run {
                                        dst[j + t] = match self.ix(ow0 + t, e) {
                                            Some(ix) => src[base + ix],
                                            None => T::zero(),
                                        };
                                    }
                                } else {
                                    for t in 0..run {
                                        dst[j + t] = self
                                            .ix(ow0 + t, e)
                                            .map_or(T::zero(), |ix| src[base + ix]);
                                    }
                                }
                            }
                        });
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds `cols` into `x`.
    fn col2im<T: Real>(&self, cols: &[T], channels: usize, p0: usize, len: usize, x: &mut [T]) {
        let in_len = self.in_len();
        let [kz, ky, kx] = self.kernel;
        let mut row = 0;
        for c in 0..channels {
            let dst = &mut x[c * in_len..(c + 1) * in_len];
            for a in 0..kz {
                for b in 0..ky {
                    for e in 0..kx {
                        let src = &cols[row * len..(row + 1) * len];
                        self.for_runs(p0, len, [a, b, e], |j, run, ow0, base| {
                            if let Some(base) = base {
                                for t in 0..run {
                                    if let Some(ix) = self.ix(ow0 + t, e) {
                                        dst[base + ix] += src[j + t];
                                    }
                                }
                            }
                        });
                        row += 1;
                    }
                }
            }
        }
    }

    fn tasks(&self, batch: usize) -> Vec<(usize, usize, usize)> {
        let chunk = self.chunk();
        let total = self.out_len();
        let mut tasks = Vec::new();
        for n in 0..batch {
            let mut p0 = 0;
            while p0 < total {
                let len = chunk.min(total - p0);
                tasks.push((n, p0, len));
                p0 += len;
            }
        }
        tasks
    }
}

/// Borrowed convolution parameters.
///
/// For [`conv3d_forward`] the weight is `(out_ch, in_ch, kz, ky, kx)`; for
/// [`transposed_conv3d_forward`] it is `(in_ch, out_ch, kz, ky, kx)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, T: Real> {
    pub weight: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<'a, T: Real> ConvParams<'a, T> {
    pub fn new(weight: &'a Tensor<T>, bias: Option<&'a Tensor<T>>, stride: usize, padding: usize) -> Self {
        ConvParams {
            weight,
            bias,
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    fn weight_dims(&self) -> Result<[usize; 5]> {
        self.weight.dims5()
    }

    fn check_bias(&self, channels: usize) -> Result<()> {
        if let Some(b) = self.bias {
            if b.shape() != [channels] {
                return Err(Error::Shape(format!(
                    "bias shape {:?}, expected [{channels}]",
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub input: bool,
    pub params: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        input: true,
        params: true,
    };
    pub const INPUT_ONLY: GradRequest = GradRequest {
        input: true,
        params: false,
    };
    pub const PARAMS_ONLY: GradRequest = GradRequest {
        input: false,
        params: true,
    };
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

fn conv_setup<T: Real>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<(ConvGeometry, [usize; 5], [usize; 5])> {
    let xd = x.dims5()?;
    let wd = p.weight_dims()?;
    if xd[1] != wd[1] {
        return Err(Error::Shape(format!(
            "conv input has {} channels, weight expects {}",
            xd[1], wd[1]
        )));
    }
    p.check_bias(wd[0])?;
    let g = ConvGeometry::new([xd[2], xd[3], xd[4]], [wd[2], wd[3], wd[4]], p.stride, p.padding)?;
    Ok((g, xd, wd))
}

/// Gathers columns `[p0, p0+len)` of a row-major `[rows, total]` matrix.
fn gather_cols<T: Real>(m: &[T], rows: usize, total: usize, p0: usize, len: usize) -> Vec<T> {
    if p0 == 0 && len == total {
        return m[..rows * total].to_vec();
    }
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&m[r * total + p0..r * total + p0 + len]);
    }
    out
}

fn scatter_cols<T: Real>(src: &[T], rows: usize, total: usize, p0: usize, len: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * total + p0..r * total + p0 + len].copy_from_slice(&src[r * len..(r + 1) * len]);
    }
}

fn add_bias<T: Real>(y: &mut [T], bias: Option<&Tensor<T>>, batch: usize, channels: usize, len: usize) {
    if let Some(b) = bias {
        for n in 0..batch {
            for (c, &bv) in b.data().iter().enumerate() {
                let start = (n * channels + c) * len;
                y[start..start + len].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

fn bias_grad<T: Real>(gy: &[T], batch: usize, channels: usize, len: usize) -> Tensor<T> {
    Tensor::from_fn([channels], |c| {
        let mut acc = 0.0f64;
        for n in 0..batch {
            let start = (n * channels + c) * len;
            acc += gy[start..start + len].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        T::cast(acc)
    })
}

fn wave_size() -> usize {
    2 * rayon::current_num_threads().max(1)
}

/// Cross-correlation; output spatial dim `floor((d + 2 pad - k) / stride) + 1`.
pub fn conv3d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let (g, xd, wd) = conv_setup(x, p)?;
    let (batch, cin, cout) = (xd[0], xd[1], wd[0]);
    let k = cin * g.kernel_volume();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let w = p.weight.data();
    let xs = x.data();

    let tasks = g.tasks(batch);
    let chunks: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, p0, len)| {
            let xn = &xs[n * cin * in_len..(n + 1) * cin * in_len];
            let mut out = vec![T::zero(); cout * len];
            if g.is_pointwise() {
                gemm(cout, k, len, w, false, xn, false, T::zero(), &mut out);
            } else {
                let mut cols = vec![T::zero(); k * len];
                g.im2col(xn, cin, p0, len, &mut cols);
                gemm(cout, k, len, w, false, &cols, false, T::zero(), &mut out);
            }
            out
        })
        .collect();

    let mut y = vec![T::zero(); batch * cout * out_len];
    for (&(n, p0, len), chunk) in tasks.iter().zip(&chunks) {
        let yn = &mut y[n * cout * out_len..(n + 1) * cout * out_len];
        scatter_cols(chunk, cout, out_len, p0, len, yn);
    }
    add_bias(&mut y, p.bias, batch, cout, out_len);
    Tensor::new([batch, cout, g.out_dims[0], g.out_dims[1], g.out_dims[2]], y)
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
    request: GradRequest,
) -> Result<ConvGrads<T>> {
    let (g, xd, wd) = conv_setup(x, p)?;
    let (batch, cin, cout) = (xd[0], xd[1], wd[0]);
    let expected = [batch, cout, g.out_dims[0], g.out_dims[1], g.out_dims[2]];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv grad_out shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let k = cin * g.kernel_volume();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let w = p.weight.data();
    let (xs, gys) = (x.data(), grad_out.data());

    let mut gx = request.input.then(|| vec![T::zero(); batch * cin * in_len]);
    let mut gw = request.params.then(|| vec![T::zero(); cout * k]);

    let tasks = g.tasks(batch);
    for wave in tasks.chunks(wave_size()) {
        let results: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = wave
            .par_iter()
            .map(|&(n, p0, len)| {
                let gy = gather_cols(&gys[n * cout * out_len..], cout, out_len, p0, len);
                let part_w = request.params.then(|| {
                    let xn = &xs[n * cin * in_len..(n + 1) * cin * in_len];
                    let mut part = vec![T::zero(); cout * k];
                    if g.is_pointwise() {
                        gemm(cout, len, k, &gy, false, xn, true, T::zero(), &mut part);
                    } else {
                        let mut cols = vec![T::zero(); k * len];
                        g.im2col(xn, cin, p0, len, &mut cols);
                        gemm(cout, len, k, &gy, false, &cols, true, T::zero(), &mut part);
                    }
                    part
                });
                let gcols = request.input.then(|| {
                    let mut gc = vec![T::zero(); k * len];
                    gemm(k, cout, len, w, true, &gy, false, T::zero(), &mut gc);
                    gc
                });
                (part_w, gcols)
            })
            .collect();
        for (&(n, p0, len), (part_w, gcols)) in wave.iter().zip(results) {
            if let (Some(gw), Some(part)) = (gw.as_mut(), part_w) {
                gw.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
            }
            if let (Some(gx), Some(gc)) = (gx.as_mut(), gcols) {
                let gxn = &mut gx[n * cin * in_len..(n + 1) * cin * in_len];
                if g.is_pointwise() {
                    gxn.iter_mut().zip(&gc).for_each(|(a, &b)| *a += b);
                } else {
                    g.col2im(&gc, cin, p0, len, gxn);
                }
            }
        }
    }

    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(xd.to_vec(), d)).transpose()?,
        weight: gw.map(|d| Tensor::new(wd.to_vec(), d)).transpose()?,
        bias: (request.params && p.bias.is_some()).then(|| bias_grad(gys, batch, cout, out_len)),
    })
}

fn tconv_setup<T: Real>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<(ConvGeometry, [usize; 5], [usize; 5])> {
    let xd = x.dims5()?;
    let wd = p.weight_dims()?;
    if xd[1] != wd[0] {
        return Err(Error::Shape(format!(
            "transposed conv input has {} channels, weight expects {}",
            xd[1], wd[0]
        )));
    }
    p.check_bias(wd[1])?;
    let g = ConvGeometry::transposed([xd[2], xd[3], xd[4]], [wd[2], wd[3], wd[4]], p.stride, p.padding)?;
    Ok((g, xd, wd))
}

/// Transposed convolution (the adjoint of [`conv3d_forward`] in its data
/// argument); output spatial dim `(d - 1) * stride - 2 pad + k`.
pub fn transposed_conv3d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let (g, xd, wd) = tconv_setup(x, p)?;
    let (batch, cin, cout) = (xd[0], xd[1], wd[1]);
    let k = cout * g.kernel_volume();
    let (big_len, small_len) = (g.in_len(), g.out_len());
    let w = p.weight.data();
    let xs = x.data();

    let mut y = vec![T::zero(); batch * cout * big_len];
    let tasks = g.tasks(batch);
    for wave in tasks.chunks(wave_size()) {
        let cols: Vec<Vec<T>> = wave
            .par_iter()
            .map(|&(n, p0, len)| {
                let xc = gather_cols(&xs[n * cin * small_len..], cin, small_len, p0, len);
                let mut c = vec![T::zero(); k * len];
                gemm(k, cin, len, w, true, &xc, false, T::zero(), &mut c);
                c
            })
            .collect();
        for (&(n, p0, len), c) in wave.iter().zip(&cols) {
            let yn = &mut y[n * cout * big_len..(n + 1) * cout * big_len];
            if g.is_pointwise() {
                yn.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
            } else {
                g.col2im(c, cout, p0, len, yn);
            }
        }
    }
    add_bias(&mut y, p.bias, batch, cout, big_len);
    Tensor::new([batch, cout, g.in_dims[0], g.in_dims[1], g.in_dims[2]], y)
}

pub fn transposed_conv3d_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
    request: GradRequest,
) -> Result<ConvGrads<T>> {
    let (g, xd, wd) = tconv_setup(x, p)?;
    let (batch, cin, cout) = (xd[0], xd[1], wd[1]);
    let expected = [batch, cout, g.in_dims[0], g.in_dims[1], g.in_dims[2]];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "transposed conv grad_out shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let k = cout * g.kernel_volume();
    let (big_len, small_len) = (g.in_len(), g.out_len());
    let w = p.weight.data();
    let (xs, gys) = (x.data(), grad_out.data());

    let mut gx = request.input.then(|| vec![T::zero(); batch * cin * small_len]);
    let mut gw = request.params.then(|| vec![T::zero(); cin * k]);
    let tasks = g.tasks(batch);
    for wave in tasks.chunks(wave_size()) {
        let results: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = wave
            .par_iter()
            .map(|&(n, p0, len)| {
                let gyn = &gys[n * cout * big_len..(n + 1) * cout * big_len];
                let gcols = if g.is_pointwise() {
                    gyn.to_vec()
                } else {
                    let mut c = vec![T::zero(); k * len];
                    g.im2col(gyn, cout, p0, len, &mut c);
                    c
                };
                let part_x = request.input.then(|| {
                    let mut out = vec![T::zero(); cin * len];
                    gemm(cin, k, len, w, false, &gcols, false, T::zero(), &mut out);
                    out
                });
                let part_w = request.params.then(|| {
                    let xc = gather_cols(&xs[n * cin * small_len..], cin, small_len, p0, len);
                    let mut part = vec![T::zero(); cin * k];
                    gemm(cin, len, k, &xc, false, &gcols, true, T::zero(), &mut part);
                    part
                });
                (part_x, part_w)
            })
            .collect();
        for (&(n, p0, len), (part_x, part_w)) in wave.iter().zip(results) {
            if let (Some(gx), Some(part)) = (gx.as_mut(), part_x) {
                let gxn = &mut gx[n * cin * small_len..(n + 1) * cin * small_len];
                scatter_cols(&part, cin, small_len, p0, len, gxn);
            }
            if let (Some(gw), Some(part)) = (gw.as_mut(), part_w) {
                gw.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(xd.to_vec(), d)).transpose()?,
        weight: gw.map(|d| Tensor::new(wd.to_vec(), d)).transpose()?,
        bias: (request.params && p.bias.is_some()).then(|| bias_grad(gys, batch, cout, big_len)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation, independent of the im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, d, h, wd] = x.dims5().unwrap();
        let [cout, _, kz, ky, kx] = w.dims5().unwrap();
        let od = (d + 2 * pad - kz) / s + 1;
        let oh = (h + 2 * pad - ky) / s + 1;
        let ow = (wd + 2 * pad - kx) / s + 1;
        let xi = |nn, c, z: isize, y: isize, xx: isize| -> f64 {
            if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
                return 0.0;
            }
            x.data()[(((nn * cin + c) * d + z as usize) * h + y as usize) * wd + xx as usize]
        };
        let mut out = vec![0.0; n * cout * od * oh * ow];
        for nn in 0..n {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b.map_or(0.0, |b| b.data()[co]);
                            for ci in 0..cin {
                                for a in 0..kz {
                                    for bb in 0..ky {
                                        for e in 0..kx {
                                            let wv = w.data()[(((co * cin + ci) * kz + a) * ky + bb) * kx + e];
                                            acc += wv
                                                * xi(
                                                    nn,
                                                    ci,
                                                    (z * s + a) as isize - pad as isize,
                                                    (y * s + bb) as isize - pad as isize,
                                                    (xx * s + e) as isize - pad as isize,
                                                );
                                        }
                                    }
                                }
                            }
                            out[(((nn * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        Tensor::new([n, cout, od, oh, ow], out).unwrap()
    }

    fn pseudo(shape: [usize; 5], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn scalar_affine() {
        let x = Tensor::<f32>::full([1, 1, 1, 1, 1], 2.0);
        let w = Tensor::full([1, 1, 1, 1, 1], 3.0);
        let b = Tensor::full([1], 1.0);
        let y = conv3d_forward(&x, &ConvParams::new(&w, Some(&b), 1, 0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = pseudo([2, 1, 4, 5, 3], 0.7).cast::<f32>();
        let mut w = Tensor::<f32>::zeros([1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0;
        let y = conv3d_forward(&x, &ConvParams::new(&w, None, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_center_is_27() {
        let x = Tensor::<f32>::full([1, 1, 3, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &ConvParams::new(&w, None, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
        let y = conv3d_forward(&x, &ConvParams::new(&w, None, 1, 1)).unwrap();
        assert_eq!(y.data()[13], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn matches_naive_convolution() {
        for &(shape, cout, k, s, pad) in &[
            ([2, 3, 5, 6, 7], 4, 3, 1, 1),
            ([1, 2, 7, 6, 5], 3, 3, 2, 1),
            ([1, 2, 4, 4, 4], 2, 1, 2, 0),
            ([1, 1, 3, 4, 5], 2, 1, 1, 0),
        ] {
            let x = pseudo(shape, 0.31);
            let w = pseudo([cout, shape[1], k, k, k], 0.17);
            let b = Tensor::from_fn([cout], |i| i as f64 - 0.5);
            let got = conv3d_forward(&x, &ConvParams::new(&w, Some(&b), s, pad)).unwrap();
            let want = naive_conv(&x, &w, Some(&b), s, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_dims_formula() {
        let g = ConvGeometry::new([16, 15, 9], [3; 3], [2; 3], [1; 3]).unwrap();
        assert_eq!(g.out_dims, [8, 8, 5]);
        let t = ConvGeometry::transposed([3, 4, 5], [2; 3], [2; 3], [0; 3]).unwrap();
        assert_eq!(t.in_dims, [6, 8, 10]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros([1, 2, 3, 3, 3]);
        let w = Tensor::zeros([1, 3, 3, 3, 3]);
        assert!(matches!(
            conv3d_forward(&x, &ConvParams::new(&w, None, 1, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = pseudo([1, 2, 4, 4, 4], 0.3);
        let w = pseudo([3, 2, 3, 3, 3], 0.2);
        let b = Tensor::zeros([3]);
        let p = ConvParams::new(&w, Some(&b), 1, 1);
        let g = conv3d_backward(&x, &p, &Tensor::zeros([1, 3, 4, 4, 4]), GradRequest::ALL).unwrap();
        for t in [g.input.unwrap(), g.weight.unwrap(), g.bias.unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bias_grad_sums_grad_out() {
        let x = pseudo([2, 1, 3, 3, 3], 0.3);
        let w = pseudo([2, 1, 3, 3, 3], 0.2);
        let b = Tensor::zeros([2]);
        let gy = pseudo([2, 2, 3, 3, 3], 0.9);
        let g = conv3d_backward(&x, &ConvParams::new(&w, Some(&b), 1, 1), &gy, GradRequest::ALL).unwrap();
        let gb = g.bias.unwrap();
        for c in 0..2 {
            let expected: f64 = (0..2)
                .map(|n| gy.data()[(n * 2 + c) * 27..(n * 2 + c + 1) * 27].iter().sum::<f64>())
                .sum();
            assert!((gb.data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), gy> == <x, conv_backward_input(gy)> and
        // <conv_w(x), gy> == <w, conv_backward_weight(gy)>
        let x = pseudo([2, 2, 5, 4, 6], 0.41);
        let w = pseudo([3, 2, 3, 3, 3], 0.23);
        let p = ConvParams::new(&w, None, 2, 1);
        let y = conv3d_forward(&x, &p).unwrap();
        let gy = Tensor::from_fn(y.shape().to_vec(), |i| ((i as f64) * 0.77).cos());
        let g = conv3d_backward(&x, &p, &gy, GradRequest::ALL).unwrap();
        let lhs = y.dot(&gy).unwrap();
        assert!((lhs - x.dot(g.input.as_ref().unwrap()).unwrap()).abs() < 1e-9);
        assert!((lhs - w.dot(g.weight.as_ref().unwrap()).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn transposed_scatter_blocks() {
        let x = Tensor::<f32>::full([1, 1, 2, 2, 2], 1.0);
        let w = Tensor::full([1, 1, 2, 2, 2], 1.0);
        let y = transposed_conv3d_forward(&x, &ConvParams::new(&w, None, 2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));

        let x = Tensor::<f32>::from_fn([1, 1, 2, 2, 2], |i| i as f32);
        let y = transposed_conv3d_forward(&x, &ConvParams::new(&w, None, 2, 0)).unwrap();
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let src = ((z / 2) * 2 + yy / 2) * 2 + xx / 2;
                    assert_eq!(y.data()[(z * 4 + yy) * 4 + xx], src as f32);
                }
            }
        }
    }

    #[test]
    fn transposed_unit_kernel_is_identity() {
        let x = pseudo([1, 1, 3, 2, 4], 0.5).cast::<f32>();
        let w = Tensor::full([1, 1, 1, 1, 1], 1.0);
        let y = transposed_conv3d_forward(&x, &ConvParams::new(&w, None, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // tconv(x; W) is conv's input-adjoint with the same weight table.
        let w = pseudo([3, 2, 3, 3, 3], 0.19); // conv: out 3, in 2
        let big = pseudo([1, 2, 7, 7, 7], 0.29);
        let pc = ConvParams::new(&w, None, 2, 1);
        let small = conv3d_forward(&big, &pc).unwrap();
        let u = Tensor::from_fn(small.shape().to_vec(), |i| ((i as f64) * 1.3).sin());
        // Transposed weight layout is (in_ch, out_ch, ...) = (3, 2, ...).
        let t = transposed_conv3d_forward(&u, &ConvParams::new(&w, None, 2, 1)).unwrap();
        assert_eq!(t.shape(), big.shape());
        assert!((small.dot(&u).unwrap() - big.dot(&t).unwrap()).abs() < 1e-9);
    }
}
