//! Training patch sampling and sliding-window inference with mean
//! aggregation of overlapping tiles.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{check_block, Volume, VoxelData};

/// Step fraction used at inference time.
pub const DEFAULT_INFER_STEP: f64 = 0.3;
/// Step fraction used for validation during training (the framework default).
pub const DEFAULT_VAL_STEP: f64 = 0.5;

/// Evenly redistributed tile origins along one axis.
pub fn axis_origins(dim: usize, patch: usize, step_fraction: f64) -> Result<Vec<usize>> {
    if !(step_fraction > 0.0 && step_fraction <= 1.0) {
        return Err(Error::Precondition(format!(
            "step fraction must be in (0, 1], got {step_fraction}"
        )));
    }
    if patch == 0 || patch > dim {
        return Err(Error::Precondition(format!(
            "patch {patch} does not fit axis of length {dim}"
        )));
    }
    if dim == patch {
        return Ok(vec![0]);
    }
    let span = (dim - patch) as f64;
    let target = patch as f64 * step_fraction;
    let n = (span / target).ceil() as usize + 1;
    let actual = span / (n - 1) as f64;
    let mut origins: Vec<usize> = (0..n).map(|i| (i as f64 * actual).round() as usize).collect();
    // Steps below one voxel would otherwise repeat origins and double-weight them.
    origins.dedup();
    Ok(origins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub patch_dims: [usize; 3],
    pub volume_dims: [usize; 3],
    pub step_fraction: f64,
    pub origins: Vec<[usize; 3]>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Cartesian product of [`axis_origins`] over the three axes, z slowest.
pub fn compute_tile_origins(
    volume_dims: [usize; 3],
    patch_dims: [usize; 3],
    step_fraction: f64,
) -> Result<TileGrid> {
    let axes = [
        axis_origins(volume_dims[0], patch_dims[0], step_fraction)?,
        axis_origins(volume_dims[1], patch_dims[1], step_fraction)?,
        axis_origins(volume_dims[2], patch_dims[2], step_fraction)?,
    ];
    let mut origins = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(TileGrid {
        patch_dims,
        volume_dims,
        step_fraction,
        origins,
    })
}

fn copy_block<T: Copy>(src: &[T], dims: [usize; 3], origin: [usize; 3], size: [usize; 3], mut put: impl FnMut(&[T])) {
    let [_, ny, nx] = dims;
    for z in 0..size[0] {
        for y in 0..size[1] {
            let row = ((origin[0] + z) * ny + origin[1] + y) * nx + origin[2];
            put(&src[row..row + size[2]]);
        }
    }
}

/// Copies a sub-block into a `(1, 1, z, y, x)` tensor. Label volumes are
/// converted to their integer values as floats.
pub fn extract_patch(v: &Volume, origin: [usize; 3], patch_dims: [usize; 3]) -> Result<Tensor> {
    check_block(v.dims(), origin, patch_dims)?;
    let mut out = Vec::with_capacity(patch_dims.iter().product());
    match v.data() {
        VoxelData::Scalar(d) => copy_block(d, v.dims(), origin, patch_dims, |row| out.extend_from_slice(row)),
        VoxelData::Label(d) => copy_block(d, v.dims(), origin, patch_dims, |row| {
            out.extend(row.iter().map(|&l| l as f32))
        }),
    }
    Tensor::new(vec![1, 1, patch_dims[0], patch_dims[1], patch_dims[2]], out)
}

/// Running per-voxel sums and tile counts for one volume, per channel.
#[derive(Debug, Clone)]
pub struct Accumulator {
    dims: [usize; 3],
    channels: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Accumulator {
    pub fn new(dims: [usize; 3], channels: usize) -> Self {
        let n: usize = dims.iter().product();
        Accumulator {
            dims,
            channels,
            sum: vec![0.0; n * channels],
            count: vec![0; n],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Adds a `(1, C, pz, py, px)` tile whose corner sits at `origin`.
    pub fn accumulate(&mut self, tile: &Tensor, origin: [usize; 3]) -> Result<()> {
        let [b, c, pz, py, px] = tile.dims5()?;
        if b != 1 || c != self.channels {
            return Err(Error::Shape(format!(
                "tile shape {:?} does not match accumulator with {} channels",
                tile.shape(),
                self.channels
            )));
        }
        let size = [pz, py, px];
        check_block(self.dims, origin, size).map_err(|e| Error::Shape(e.to_string()))?;
        let [_, ny, nx] = self.dims;
        let n: usize = self.dims.iter().product();
        let t = tile.data();
        let tile_len = pz * py * px;
        for z in 0..pz {
            for y in 0..py {
                let row = ((origin[0] + z) * ny + origin[1] + y) * nx + origin[2];
                let src = (z * py + y) * px;
                for ch in 0..c {
                    let dst = &mut self.sum[ch * n + row..ch * n + row + px];
                    let s = &t[ch * tile_len + src..ch * tile_len + src + px];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += v as f64;
                    }
                }
                for k in &mut self.count[row..row + px] {
                    *k += 1;
                }
            }
        }
        Ok(())
    }

    /// Mean over tiles as a `(1, C, z, y, x)` tensor.
    pub fn finalize_tensor(&self) -> Result<Tensor> {
        if let Some(i) = self.count.iter().position(|&k| k == 0) {
            let [_, ny, nx] = self.dims;
            return Err(Error::Coverage(format!(
                "voxel ({}, {}, {}) was not covered by any tile",
                i / (ny * nx),
                (i / nx) % ny,
                i % nx
            )));
        }
        let n = self.count.len();
        let data = self
            .sum
            .iter()
            .enumerate()
            .map(|(i, &s)| (s / self.count[i % n] as f64) as f32)
            .collect();
        let [z, y, x] = self.dims;
        Tensor::new(vec![1, self.channels, z, y, x], data)
    }

    /// Mean over tiles as a scalar volume; single-channel accumulators only.
    pub fn finalize(&self) -> Result<Volume> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "finalize to a volume needs 1 channel, have {}",
                self.channels
            )));
        }
        Volume::scalar(self.dims, self.finalize_tensor()?.into_data())
    }
}

fn min_value(v: &Volume) -> Result<f32> {
    Ok(v.scalars()?.iter().copied().fold(f32::INFINITY, f32::min))
}

/// Sliding-window prediction over a whole volume.
///
/// The volume is padded symmetrically with its minimum when smaller than the
/// patch, tiled with [`compute_tile_origins`], each tile is passed through
/// `predict` in grid order, and the mean-aggregated `(1, C, z, y, x)` result
/// is cropped back to the original extent.
pub fn sliding_window<F>(
    v: &Volume,
    patch_dims: [usize; 3],
    step_fraction: f64,
    channels: usize,
    mut predict: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let (padded, offset) = v.pad_to(patch_dims, min_value(v)?)?;
    let grid = compute_tile_origins(padded.dims(), patch_dims, step_fraction)?;
    let mut acc = Accumulator::new(padded.dims(), channels);
    for &origin in &grid.origins {
        let tile = extract_patch(&padded, origin, patch_dims)?;
        let out = predict(&tile)?;
        acc.accumulate(&out, origin)?;
    }
    let full = acc.finalize_tensor()?;
    if padded.dims() == v.dims() {
        return Ok(full);
    }
    crop_channels(&full, offset, v.dims())
}

/// Single-channel [`sliding_window`] returning a volume with `v`'s geometry.
pub fn sliding_window_volume<F>(v: &Volume, patch_dims: [usize; 3], step_fraction: f64, predict: F) -> Result<Volume>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let out = sliding_window(v, patch_dims, step_fraction, 1, predict)?;
    v.like_scalar(out.into_data())
}

fn crop_channels(t: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Result<Tensor> {
    let [_, c, z, y, x] = t.dims5()?;
    let n = z * y * x;
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        copy_block(&t.data()[ch * n..(ch + 1) * n], [z, y, x], origin, size, |row| {
            out.extend_from_slice(row)
        });
    }
    Tensor::new(vec![1, c, size[0], size[1], size[2]], out)
}

/// Uniformly random in-bounds corner for a patch.
pub fn sample_origin<R: Rng + ?Sized>(dims: [usize; 3], patch_dims: [usize; 3], rng: &mut R) -> Result<[usize; 3]> {
    let mut o = [0usize; 3];
    for a in 0..3 {
        if patch_dims[a] == 0 || patch_dims[a] > dims[a] {
            return Err(Error::Precondition(format!(
                "patch {patch_dims:?} does not fit dims {dims:?}"
            )));
        }
        o[a] = rng.random_range(0..=dims[a] - patch_dims[a]);
    }
    Ok(o)
}

/// Pads `v` with its minimum (labels with 0) up to `patch_dims`.
pub fn pad_for_patch(v: &Volume, patch_dims: [usize; 3]) -> Result<Volume> {
    let fill = match v.data() {
        VoxelData::Scalar(_) => min_value(v)?,
        VoxelData::Label(_) => 0.0,
    };
    Ok(v.pad_to(patch_dims, fill)?.0)
}

/// Same random patch from a pair of co-registered volumes.
pub fn sample_training_patch<R: Rng + ?Sized>(
    input: &Volume,
    target: &Volume,
    patch_dims: [usize; 3],
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if input.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "input dims {:?} differ from target dims {:?}",
            input.dims(),
            target.dims()
        )));
    }
    let input = pad_for_patch(input, patch_dims)?;
    let target = pad_for_patch(target, patch_dims)?;
    let origin = sample_origin(input.dims(), patch_dims, rng)?;
    Ok((
        extract_patch(&input, origin, patch_dims)?,
        extract_patch(&target, origin, patch_dims)?,
    ))
}
