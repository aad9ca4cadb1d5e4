//! Named tensor tables on disk.
//!
//! Layout (little-endian): magic `VXCK`, u32 format version, u64 seed,
//! u32 metadata length + UTF-8 key-value text, u32 tensor count, then per
//! tensor: u32 name length + UTF-8 name, u32 rank, u32 x rank dims, f32
//! payload. Tensors are written in table order, so identical tables give
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXCK";
const FORMAT_VERSION: u32 = 1;

/// Versions of the numeric kernels whose semantics a checkpoint depends on.
pub const OP_VERSIONS: &[(&str, u32)] = &[
    ("conv3d", 1),
    ("transposed_conv3d", 1),
    ("instance_norm", 1),
    ("leaky_relu", 1),
    ("trilinear_upsample2x", 1),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(seed: u64, tensors: Vec<(String, Tensor<f32>)>) -> Self {
        let metadata = OP_VERSIONS
            .iter()
            .map(|(op, v)| (format!("op_version.{op}"), v.to_string()))
            .collect();
        Checkpoint {
            seed,
            metadata,
            tensors,
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        let meta = toml::to_string(&self.metadata).expect("metadata serializes");
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(meta.as_bytes());
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            let start = out.len();
            out.resize(start + 4 * t.numel(), 0);
            LittleEndian::write_f32_into(t.data(), &mut out[start..]);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing VXCK magic".into()));
        }
        let mut r = &bytes[4..];
        let trunc = |_| Error::Corruption("checkpoint truncated".into());
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let meta_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let meta = take(&mut r, meta_len)?;
        let meta = std::str::from_utf8(meta).map_err(|e| Error::Corruption(e.to_string()))?;
        let metadata: BTreeMap<String, String> =
            toml::from_str(meta).map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|e| Error::Corruption(e.to_string()))?
                .to_string();
            let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut r, 4 * n)?;
            let mut data = vec![0f32; n];
            LittleEndian::read_f32_into(payload, &mut data);
            let t = Tensor::new(shape, data).map_err(|e| Error::Corruption(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Corruption(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            seed,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Corruption("checkpoint truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
