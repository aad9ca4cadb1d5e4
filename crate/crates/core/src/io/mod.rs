//! Disk formats: VOX1 volumes and JSON dataset manifests.

mod manifest;
mod vox;

pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Region, Task};
pub use vox::{decode_volume, encode_volume, read_volume, write_volume, HEADER_LEN, MAGIC};
