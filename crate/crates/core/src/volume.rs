//! In-memory volumes: a 3D scalar or label field with voxel geometry.
//!
//! Data is stored z-major with x fastest: voxel `(z, y, x)` lives at
//! `z * (Y * X) + y * X + x`.

use crate::error::{Error, Result};

/// Largest valid value in a label volume (background plus six classes).
pub const MAX_LABEL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    ScalarF32,
    LabelU8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Scalar(Vec<f32>),
    Label(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Scalar(v) => v.len(),
            VoxelData::Label(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f32; 3],
    origin_mm: [f32; 3],
    data: VoxelData,
}

impl Volume {
    /// Builds a volume, checking every invariant.
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f32; 3],
        origin_mm: [f32; 3],
        data: VoxelData,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invariant(format!("dims must be positive, got {dims:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Invariant(format!(
                "data length {} does not match dims {dims:?} (expected {expected})",
                data.len()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Invariant(format!(
                "spacing must be strictly positive, got {spacing_mm:?}"
            )));
        }
        if let VoxelData::Label(labels) = &data {
            if let Some(bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
                return Err(Error::Invariant(format!(
                    "label value {bad} outside 0..={MAX_LABEL}"
                )));
            }
        }
        Ok(Volume {
            dims,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    /// Scalar volume with unit spacing and zero origin.
    pub fn scalar(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3], VoxelData::Scalar(data))
    }

    /// Label volume with unit spacing and zero origin.
    pub fn labels(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3], VoxelData::Label(data))
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::scalar(dims, vec![value; dims.iter().product()])
    }

    pub fn with_spacing(mut self, spacing_mm: [f32; 3]) -> Result<Self> {
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Invariant(format!(
                "spacing must be strictly positive, got {spacing_mm:?}"
            )));
        }
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    pub fn with_origin(mut self, origin_mm: [f32; 3]) -> Self {
        self.origin_mm = origin_mm;
        self
    }

    /// A scalar volume with the same geometry as `self`.
    pub fn like_scalar(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing_mm, self.origin_mm, VoxelData::Scalar(data))
    }

    /// A label volume with the same geometry as `self`.
    pub fn like_labels(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.dims, self.spacing_mm, self.origin_mm, VoxelData::Label(data))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f32; 3] {
        self.origin_mm
    }

    pub fn kind(&self) -> VolumeKind {
        match self.data {
            VoxelData::Scalar(_) => VolumeKind::ScalarF32,
            VoxelData::Label(_) => VolumeKind::LabelU8,
        }
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn scalars(&self) -> Result<&[f32]> {
        match &self.data {
            VoxelData::Scalar(v) => Ok(v),
            VoxelData::Label(_) => Err(Error::Precondition("expected a scalar volume".into())),
        }
    }

    pub fn label_values(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::Label(v) => Ok(v),
            VoxelData::Scalar(_) => Err(Error::Precondition("expected a label volume".into())),
        }
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    /// Applies `f` to every scalar voxel, keeping the geometry.
    pub fn map_scalars(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let values = self.scalars()?.iter().map(|&v| f(v)).collect();
        self.like_scalar(values)
    }

    /// Sub-block `[origin, origin + size)` copied out as a new volume.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        check_block(self.dims, origin, size)?;
        let [_, ny, nx] = self.dims;
        let pick = |out: &mut Vec<usize>| {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let row = ((origin[0] + z) * ny + origin[1] + y) * nx + origin[2];
                    out.extend(row..row + size[2]);
                }
            }
        };
        let mut idx = Vec::with_capacity(size.iter().product());
        pick(&mut idx);
        let data = match &self.data {
            VoxelData::Scalar(v) => VoxelData::Scalar(idx.iter().map(|&i| v[i]).collect()),
            VoxelData::Label(v) => VoxelData::Label(idx.iter().map(|&i| v[i]).collect()),
        };
        Volume::new(size, self.spacing_mm, self.origin_mm, data)
    }

    /// Pads each axis symmetrically up to at least `min_dims` using `fill`
    /// (truncated to an integer label for label volumes). Returns the padded
    /// volume and the offset of the original data in it.
    pub fn pad_to(&self, min_dims: [usize; 3], fill: f32) -> Result<(Self, [usize; 3])> {
        let mut new_dims = self.dims;
        let mut before = [0usize; 3];
        for a in 0..3 {
            if min_dims[a] > self.dims[a] {
                let total = min_dims[a] - self.dims[a];
                before[a] = total / 2;
                new_dims[a] = min_dims[a];
            }
        }
        if new_dims == self.dims {
            return Ok((self.clone(), [0; 3]));
        }
        let data = match &self.data {
            VoxelData::Scalar(v) => VoxelData::Scalar(pad_block(v, self.dims, new_dims, before, fill)),
            VoxelData::Label(v) => VoxelData::Label(pad_block(v, self.dims, new_dims, before, fill as u8)),
        };
        let padded = Volume::new(new_dims, self.spacing_mm, self.origin_mm, data)?;
        Ok((padded, before))
    }
}

fn pad_block<T: Copy>(values: &[T], dims: [usize; 3], new_dims: [usize; 3], before: [usize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; new_dims.iter().product()];
    let [nz, ny, nx] = dims;
    for z in 0..nz {
        for y in 0..ny {
            let src = (z * ny + y) * nx;
            let dst = ((z + before[0]) * new_dims[1] + y + before[1]) * new_dims[2] + before[2];
            out[dst..dst + nx].copy_from_slice(&values[src..src + nx]);
        }
    }
    out
}

pub(crate) fn check_block(dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > dims[a] {
            return Err(Error::Precondition(format!(
                "block at {origin:?} of size {size:?} exceeds volume dims {dims:?}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Volume::scalar([2, 3, 5], vec![0.0; 29]).unwrap_err();
        assert!(err.to_string().contains("expected 30"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(matches!(
            Volume::labels([1, 1, 2], vec![0, 9]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn rejects_nonpositive_spacing() {
        let v = Volume::filled([1, 1, 1], 0.0).unwrap();
        assert!(v.with_spacing([1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn index_is_z_major() {
        let dims = [3, 4, 5];
        let data = (0..60)
            .map(|i| {
                let (z, y, x) = (i / 20, (i / 5) % 4, i % 5);
                (100 * z + 10 * y + x) as f32
            })
            .collect();
        let v = Volume::scalar(dims, data).unwrap();
        assert_eq!(v.scalars().unwrap()[v.index(2, 3, 4)], 234.0);
        assert_eq!(v.scalars().unwrap()[v.index(1, 0, 2)], 102.0);
    }

    #[test]
    fn crop_and_pad() {
        let v = Volume::scalar([2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let c = v.crop([1, 0, 1], [1, 2, 1]).unwrap();
        assert_eq!(c.scalars().unwrap(), &[5.0, 7.0]);
        let (p, off) = v.pad_to([4, 2, 3], -1.0).unwrap();
        assert_eq!(p.dims(), [4, 2, 3]);
        assert_eq!(off, [1, 0, 0]);
        let back = p.crop(off, [2, 2, 2]).unwrap();
        assert_eq!(back.scalars().unwrap(), v.scalars().unwrap());
        assert!(v.crop([1, 1, 1], [2, 1, 1]).is_err());
    }
}
