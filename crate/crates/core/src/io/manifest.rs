//! Dataset manifests: a JSON document listing paired cases.
//!
//! ```json
//! {
//!   "task": "mr2ct",
//!   "entries": [
//!     {"case_id": "1ABA005", "input_path": "1ABA005_mr.vox",
//!      "target_path": "1ABA005_ct.vox", "label_path": null, "region": "AB"}
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory at load time.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    HN,
    AB,
    TH,
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HN" => Ok(Region::HN),
            "AB" => Ok(Region::AB),
            "TH" => Ok(Region::TH),
            other => Err(Error::Parse(format!(
                "unknown region {other:?} (expected HN, AB or TH)"
            ))),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Region::HN => "HN",
            Region::AB => "AB",
            Region::TH => "TH",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// MR to CT.
    Mr2ct,
    /// CBCT to CT.
    Cbct2ct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub input_path: PathBuf,
    pub target_path: PathBuf,
    #[serde(default)]
    pub label_path: Option<PathBuf>,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }

    /// Subset of entries in the order given by `ids`.
    pub fn select(&self, ids: &[String]) -> Result<DatasetManifest> {
        let entries = ids
            .iter()
            .map(|id| {
                self.entry(id)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("case {id} not in manifest")))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest {
            task: self.task,
            entries,
        })
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Validation(format!("duplicate case_id {:?}", e.case_id)));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    manifest.check_unique_ids()?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut missing = Vec::new();
    for e in &mut manifest.entries {
        e.input_path = resolve(&e.input_path);
        e.target_path = resolve(&e.target_path);
        e.label_path = e.label_path.as_deref().map(resolve);
        let mut files = vec![&e.input_path, &e.target_path];
        files.extend(e.label_path.as_ref());
        for f in files {
            if !f.is_file() {
                missing.push(format!("{} ({})", e.case_id, f.display()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "missing files for case(s): {}",
            missing.join(", ")
        )));
    }
    Ok(manifest)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    m.check_unique_ids()?;
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
