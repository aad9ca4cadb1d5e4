//! Merging fine-grained anatomical labels into the compact seven-class set.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const BACKGROUND: u8 = 0;
pub const ORGANS: u8 = 1;
pub const CARDIAC: u8 = 2;
pub const MUSCLES: u8 = 3;
pub const BONES: u8 = 4;
pub const RIBS: u8 = 5;
pub const VERTEBRAE: u8 = 6;

/// Compact class names in index order, background first.
pub const CLASS_NAMES: [&str; 7] = ["background", "organs", "cardiac", "muscles", "bones", "ribs", "vertebrae"];

pub fn class_id(name: &str) -> Option<u8> {
    CLASS_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
}

/// What to do with a nonzero raw label that has no mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnmappedPolicy {
    /// Map to background and count it in the report.
    #[default]
    Background,
    Error,
}

/// Raw label value to compact class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelMapping {
    pub classes: BTreeMap<u32, u8>,
    pub unmapped: UnmappedPolicy,
}

impl LabelMapping {
    /// Builds a mapping from `raw label -> compact class name` pairs.
    pub fn from_names<'a>(pairs: impl IntoIterator<Item = (u32, &'a str)>) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for (raw, name) in pairs {
            let id = class_id(name).ok_or_else(|| Error::Parse(format!("unknown compact class {name:?}")))?;
            classes.insert(raw, id);
        }
        Ok(LabelMapping {
            classes,
            unmapped: UnmappedPolicy::Background,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    pub labels: Volume,
    /// Distinct unmapped raw values and their voxel counts.
    pub unmapped: BTreeMap<u32, usize>,
}

/// Maps raw labels (given as integers in a flat array shaped like `like`).
pub fn merge_labels(raw: &[u32], like: &Volume, mapping: &LabelMapping) -> Result<MergeReport> {
    if raw.len() != like.len() {
        return Err(Error::Shape(format!(
            "{} raw labels for a volume of {} voxels",
            raw.len(),
            like.len()
        )));
    }
    let mut unmapped = BTreeMap::new();
    let mut out = Vec::with_capacity(raw.len());
    for &r in raw {
        let c = if r == 0 {
            BACKGROUND
        } else if let Some(&c) = mapping.classes.get(&r) {
            c
        } else {
            *unmapped.entry(r).or_insert(0) += 1;
            BACKGROUND
        };
        out.push(c);
    }
    if mapping.unmapped == UnmappedPolicy::Error && !unmapped.is_empty() {
        let keys: Vec<String> = unmapped.keys().map(u32::to_string).collect();
        return Err(Error::Validation(format!("unmapped raw labels: {}", keys.join(", "))));
    }
    Ok(MergeReport {
        labels: like.like_labels(out)?,
        unmapped,
    })
}

/// [`merge_labels`] for a label volume already stored as bytes.
pub fn merge_label_volume(raw: &Volume, mapping: &LabelMapping) -> Result<MergeReport> {
    let values: Vec<u32> = raw.label_values()?.iter().map(|&v| v as u32).collect();
    merge_labels(&values, raw, mapping)
}
