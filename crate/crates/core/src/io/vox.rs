//! The VOX1 container.
//!
//! Little-endian layout, 64-byte header followed by the z-major payload:
//!
//! | bytes  | field                               |
//! |--------|-------------------------------------|
//! | 0..4   | magic `VOX1`                        |
//! | 4..8   | u32 version (1)                     |
//! | 8..12  | u32 dtype (1 = f32, 2 = u8)         |
//! | 12..24 | u32 x3 dims (z, y, x)               |
//! | 24..36 | f32 x3 spacing in mm (z, y, x)      |
//! | 36..48 | f32 x3 origin in mm (z, y, x)       |
//! | 48..64 | zero padding                        |

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelData};

pub const MAGIC: &[u8; 4] = b"VOX1";
pub const HEADER_LEN: usize = 64;
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const DTYPE_U8: u32 = 2;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let (dtype, elem) = match v.data() {
        VoxelData::Scalar(_) => (DTYPE_F32, 4),
        VoxelData::Label(_) => (DTYPE_U8, 1),
    };
    let mut buf = vec![0u8; HEADER_LEN + v.len() * elem];
    buf[0..4].copy_from_slice(MAGIC);
    LittleEndian::write_u32(&mut buf[4..8], VERSION);
    LittleEndian::write_u32(&mut buf[8..12], dtype);
    for (i, &d) in v.dims().iter().enumerate() {
        LittleEndian::write_u32(&mut buf[12 + 4 * i..16 + 4 * i], d as u32);
    }
    LittleEndian::write_f32_into(&v.spacing_mm(), &mut buf[24..36]);
    LittleEndian::write_f32_into(&v.origin_mm(), &mut buf[36..48]);
    match v.data() {
        VoxelData::Scalar(values) => LittleEndian::write_f32_into(values, &mut buf[HEADER_LEN..]),
        VoxelData::Label(values) => buf[HEADER_LEN..].copy_from_slice(values),
    }
    buf
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing VOX1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!(
            "header truncated: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(Error::Unsupported(format!("VOX1 version {version}")));
    }
    let dtype = LittleEndian::read_u32(&bytes[8..12]);
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(Error::Unsupported(format!("dtype code {other}"))),
    };
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = LittleEndian::read_u32(&bytes[12 + 4 * i..16 + 4 * i]) as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Corruption(format!("zero dimension in {dims:?}")));
    }
    let mut spacing = [0f32; 3];
    let mut origin = [0f32; 3];
    LittleEndian::read_f32_into(&bytes[24..36], &mut spacing);
    LittleEndian::read_f32_into(&bytes[36..48], &mut origin);

    let expected = dims[0] * dims[1] * dims[2];
    let payload = &bytes[HEADER_LEN..];
    if payload.len() % elem != 0 || payload.len() / elem != expected {
        return Err(Error::Corruption(format!(
            "payload holds {} bytes, dims {dims:?} need {} (expected {expected} voxels)",
            payload.len(),
            expected * elem
        )));
    }
    let data = if dtype == DTYPE_F32 {
        let mut values = vec![0f32; expected];
        LittleEndian::read_f32_into(payload, &mut values);
        VoxelData::Scalar(values)
    } else {
        VoxelData::Label(payload.to_vec())
    };
    Volume::new(dims, spacing, origin, data)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_constant_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vox");
        let v = Volume::filled([4, 4, 4], 7.5)
            .unwrap()
            .with_spacing([2.0, 0.75, 0.75])
            .unwrap();
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.spacing_mm(), [2.0, 0.75, 0.75]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_volume(&Volume::filled([1, 1, 1], 0.0).unwrap());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_corruption() {
        let v = Volume::filled([2, 3, 5], 1.0).unwrap();
        let mut bytes = encode_volume(&v);
        bytes.truncate(HEADER_LEN + 29 * 4);
        let err = decode_volume(&bytes).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)));
        assert!(err.to_string().contains("expected 30"), "{err}");
    }

    #[test]
    fn unknown_dtype_is_unsupported() {
        let mut bytes = encode_volume(&Volume::filled([1, 1, 1], 0.0).unwrap());
        LittleEndian::write_u32(&mut bytes[8..12], 7);
        assert!(matches!(decode_volume(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn single_voxel_file_size() {
        let bytes = encode_volume(&Volume::filled([1, 1, 1], 3.0).unwrap());
        assert_eq!(bytes.len(), 64 + 4);
        let labels = encode_volume(&Volume::labels([1, 1, 1], vec![4]).unwrap());
        assert_eq!(labels.len(), 64 + 1);
    }

    #[test]
    fn writes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::scalar([2, 2, 3], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
        let (a, b) = (dir.path().join("a.vox"), dir.path().join("b.vox"));
        write_volume(&v, &a).unwrap();
        write_volume(&v, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn label_out_of_range_on_disk_is_rejected() {
        let mut bytes = encode_volume(&Volume::labels([1, 1, 2], vec![1, 2]).unwrap());
        bytes[HEADER_LEN + 1] = 9;
        assert!(matches!(decode_volume(&bytes), Err(Error::Invariant(_))));
    }

    #[test]
    fn coordinate_encoding_survives_round_trip() {
        let dims = [3, 4, 5];
        let data = (0..dims.iter().product::<usize>())
            .map(|i| (100 * (i / 20) + 10 * ((i / 5) % 4) + i % 5) as f32)
            .collect();
        let v = Volume::scalar(dims, data).unwrap();
        let back = decode_volume(&encode_volume(&v)).unwrap();
        let vals = back.scalars().unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(vals[z * 20 + y * 5 + x], (100 * z + 10 * y + x) as f32);
                }
            }
        }
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (
            1usize..6,
            1usize..6,
            1usize..6,
            prop::array::uniform3(0.1f32..5.0),
            prop::array::uniform3(-100f32..100.0),
            any::<bool>(),
        )
            .prop_flat_map(|(z, y, x, sp, or, is_label)| {
                let n = z * y * x;
                let data = if is_label {
                    prop::collection::vec(0u8..=6, n)
                        .prop_map(VoxelData::Label)
                        .boxed()
                } else {
                    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
                        .prop_map(VoxelData::Scalar)
                        .boxed()
                };
                data.prop_map(move |d| Volume::new([z, y, x], sp, or, d).unwrap())
            })
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(v in arb_volume()) {
            let bytes = encode_volume(&v);
            prop_assert_eq!(decode_volume(&bytes).unwrap(), v);
        }
    }
}
