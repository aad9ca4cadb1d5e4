//! Intensity normalization, dataset fingerprints and the train/validation split.
//!
//! MR inputs are z-scored per case. CT (and CBCT) volumes are clipped to the
//! HU window and z-scored with dataset-level statistics gathered after
//! clipping. Predictions are mapped back to HU with the same fingerprint.

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{DatasetManifest, Task};
use crate::numeric::CompensatedSum;
use crate::volume::Volume;

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;
/// Fraction of cases held out for validation.
pub const VAL_FRACTION: f64 = 0.10;
const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub mean_hu: f64,
    pub std_hu: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub n_voxels: u64,
}

impl Fingerprint {
    pub fn new(mean_hu: f64, std_hu: f64) -> Result<Self> {
        let fp = Fingerprint {
            mean_hu,
            std_hu,
            clip_lo: HU_MIN,
            clip_hi: HU_MAX,
            n_voxels: 0,
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std_hu.is_finite() && self.std_hu > 0.0) {
            return Err(Error::Invariant(format!("fingerprint std {} must be > 0", self.std_hu)));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Invariant(format!(
                "clip bounds [{}, {}] are not ordered",
                self.clip_lo, self.clip_hi
            )));
        }
        if !self.mean_hu.is_finite() {
            return Err(Error::Invariant("fingerprint mean is not finite".into()));
        }
        Ok(())
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.clip_lo, self.clip_hi)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fingerprint serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let fp: Fingerprint =
            toml::from_str(text).map_err(|e| Error::Parse(format!("fingerprint: {e}")))?;
        fp.validate()?;
        Ok(fp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Streaming accumulator for [`compute_fingerprint`]; holds no voxel data.
#[derive(Debug, Clone, Default)]
pub struct FingerprintAccumulator {
    sum: CompensatedSum,
    sum_sq: CompensatedSum,
    count: u64,
}

impl FingerprintAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, ct: &Volume) -> Result<()> {
        for &v in ct.scalars()? {
            let c = (v as f64).clamp(HU_MIN, HU_MAX);
            self.sum.add(c);
            self.sum_sq.add(c * c);
        }
        self.count += ct.len() as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<Fingerprint> {
        if self.count == 0 {
            return Err(Error::Precondition("fingerprint needs at least one volume".into()));
        }
        let n = self.count as f64;
        let mean = self.sum.value() / n;
        let var = (self.sum_sq.value() / n - mean * mean).max(0.0);
        let std = var.sqrt();
        if std < MIN_STD {
            return Err(Error::Degenerate(format!(
                "dataset intensity std {std:e} below {MIN_STD:e}"
            )));
        }
        Ok(Fingerprint {
            mean_hu: mean,
            std_hu: std,
            clip_lo: HU_MIN,
            clip_hi: HU_MAX,
            n_voxels: self.count,
        })
    }
}

/// Dataset-level CT statistics over all voxels after clipping.
pub fn compute_fingerprint<I>(ct_volumes: I) -> Result<Fingerprint>
where
    I: IntoIterator,
    I::Item: Borrow<Volume>,
{
    let mut acc = FingerprintAccumulator::new();
    for v in ct_volumes {
        acc.add(v.borrow())?;
    }
    acc.finish()
}

/// Per-case z-score with population statistics. Returns the normalized
/// volume together with the mean and std that were used.
pub fn zscore_per_case(v: &Volume) -> Result<(Volume, f64, f64)> {
    let values = v.scalars()?;
    if values.len() < 2 {
        return Err(Error::Precondition("z-score needs at least 2 voxels".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&x| x as f64).collect::<CompensatedSum>().value() / n;
    let var = values
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .collect::<CompensatedSum>()
        .value()
        / n;
    let std = var.sqrt();
    if std < MIN_STD {
        return Err(Error::Degenerate(format!(
            "per-case std {std:e} below {MIN_STD:e} (constant volume?)"
        )));
    }
    let out = v.map_scalars(|x| ((x as f64 - mean) / std) as f32)?;
    Ok((out, mean, std))
}

/// `(clip(v) - mean) / std`.
pub fn normalize_ct(v: &Volume, fp: &Fingerprint) -> Result<Volume> {
    fp.validate()?;
    v.map_scalars(|x| ((fp.clip(x as f64) - fp.mean_hu) / fp.std_hu) as f32)
}

/// `clip(pred * std + mean)`.
pub fn invert_to_hu(pred: &Volume, fp: &Fingerprint) -> Result<Volume> {
    fp.validate()?;
    pred.map_scalars(|z| fp.clip(z as f64 * fp.std_hu + fp.mean_hu) as f32)
}

/// Normalizes a network input according to the task: MR volumes are
/// z-scored per case, CBCT volumes use the dataset-level input fingerprint.
pub fn normalize_input(v: &Volume, task: Task, input_fp: Option<&Fingerprint>) -> Result<Volume> {
    match task {
        Task::Mr2ct => zscore_per_case(v).map(|(out, _, _)| out),
        Task::Cbct2ct => {
            let fp = input_fp.ok_or_else(|| {
                Error::Precondition("cbct2ct inputs need a dataset fingerprint".into())
            })?;
            normalize_ct(v, fp)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

/// Number of validation cases for a dataset of `total` cases.
pub fn validation_count(total: usize) -> usize {
    ((total as f64 * VAL_FRACTION).round() as usize).clamp(1, total.saturating_sub(1).max(1))
}

/// Seeded shuffle, then the first `validation_count` ids become validation.
pub fn split_dataset(m: &DatasetManifest, seed: u64) -> Result<SplitAssignment> {
    if m.len() < 2 {
        return Err(Error::Precondition(format!(
            "split needs at least 2 cases, manifest has {}",
            m.len()
        )));
    }
    let mut ids: Vec<String> = m.entries.iter().map(|e| e.case_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = validation_count(ids.len());
    let train_ids = ids.split_off(n_val);
    Ok(SplitAssignment {
        train_ids,
        val_ids: ids,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{ManifestEntry, Region};
    use proptest::prelude::*;

    fn vol(values: &[f32]) -> Volume {
        Volume::scalar([1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn zscore_of_ramp_is_standardized() {
        let ramp: Vec<f32> = (1..=64).map(|i| i as f32).collect();
        let (out, _, _) = zscore_per_case(&Volume::scalar([4, 4, 4], ramp).unwrap()).unwrap();
        let vals = out.scalars().unwrap();
        let n = vals.len() as f64;
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zscore_two_values_uses_population_std() {
        let (out, mean, std) = zscore_per_case(&vol(&[0.0, 2.0])).unwrap();
        assert_eq!(out.scalars().unwrap(), &[-1.0, 1.0]);
        assert_eq!((mean, std), (1.0, 1.0));
    }

    #[test]
    fn zscore_rejects_constant_and_tiny_volumes() {
        assert!(matches!(
            zscore_per_case(&Volume::filled([2, 2, 2], 5.0).unwrap()),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(zscore_per_case(&vol(&[1.0])), Err(Error::Precondition(_))));
    }

    #[test]
    fn fingerprint_examples() {
        assert!(matches!(
            compute_fingerprint([Volume::filled([2, 2, 2], 100.0).unwrap()]),
            Err(Error::Degenerate(_))
        ));
        let fp = compute_fingerprint([vol(&[-2000.0]), vol(&[4000.0])]).unwrap();
        assert_eq!(fp.mean_hu, 1023.5);
        assert_eq!(fp.n_voxels, 2);
        let fp = compute_fingerprint([vol(&[0.0, 0.0, 100.0, 100.0])]).unwrap();
        assert_eq!((fp.mean_hu, fp.std_hu), (50.0, 50.0));
        assert!(matches!(
            compute_fingerprint(Vec::<Volume>::new()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let fp = Fingerprint::new(0.0, 1.0).unwrap();
        assert_eq!(normalize_ct(&vol(&[4000.0]), &fp).unwrap().scalars().unwrap(), &[3071.0]);
        let fp = Fingerprint::new(0.0, 512.0).unwrap();
        assert_eq!(normalize_ct(&vol(&[-1024.0]), &fp).unwrap().scalars().unwrap(), &[-2.0]);
        let fp = Fingerprint::new(37.5, 80.0).unwrap();
        assert_eq!(normalize_ct(&vol(&[37.5]), &fp).unwrap().scalars().unwrap(), &[0.0]);
    }

    #[test]
    fn invert_examples() {
        let fp = Fingerprint::new(-120.0, 400.0).unwrap();
        assert_eq!(invert_to_hu(&vol(&[0.0]), &fp).unwrap().scalars().unwrap(), &[-120.0]);
        let fp = Fingerprint::new(0.0, 400.0).unwrap();
        assert_eq!(invert_to_hu(&vol(&[10.0]), &fp).unwrap().scalars().unwrap(), &[3071.0]);
    }

    #[test]
    fn fingerprint_toml_round_trip() {
        let fp = compute_fingerprint([vol(&[-1000.0, 20.0, 40.0, 1500.0])]).unwrap();
        assert_eq!(Fingerprint::from_toml(&fp.to_toml()).unwrap(), fp);
        assert!(Fingerprint::from_toml("mean_hu = 0.0\nstd_hu = 0.0\nclip_lo = -1024.0\nclip_hi = 3071.0\nn_voxels = 1\n").is_err());
    }

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            task: Task::Mr2ct,
            entries: (0..n)
                .map(|i| ManifestEntry {
                    case_id: format!("1ABA{i:03}"),
                    input_path: "a".into(),
                    target_path: "b".into(),
                    label_path: None,
                    region: Region::AB,
                })
                .collect(),
        }
    }

    #[test]
    fn split_ratios() {
        let s = split_dataset(&manifest(10), 3).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (9, 1));
        let s = split_dataset(&manifest(2), 3).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (1, 1));
        let s = split_dataset(&manifest(24), 3).unwrap();
        assert_eq!(s.val_ids.len(), 2);
        assert!(split_dataset(&manifest(1), 3).is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let m = manifest(37);
        let a = split_dataset(&m, 11).unwrap();
        assert_eq!(a, split_dataset(&m, 11).unwrap());
        let mut all: Vec<_> = a.train_ids.iter().chain(&a.val_ids).cloned().collect();
        all.sort();
        let mut expected: Vec<_> = m.entries.iter().map(|e| e.case_id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(a in -5000f32..5000.0, b in -5000f32..5000.0,
                                 mean in -500f64..500.0, std in 1f64..1000.0) {
            let fp = Fingerprint::new(mean, std).unwrap();
            let out = normalize_ct(&vol(&[a, b]), &fp).unwrap();
            let o = out.scalars().unwrap();
            if a <= b { prop_assert!(o[0] <= o[1]); } else { prop_assert!(o[0] >= o[1]); }
        }

        #[test]
        fn fingerprint_ignores_volume_order(
            vols in prop::collection::vec(prop::collection::vec(-3000f32..5000.0, 2..40), 2..6)
        ) {
            let vs: Vec<Volume> = vols.iter().map(|v| vol(v)).collect();
            let fwd = compute_fingerprint(vs.iter());
            let rev = compute_fingerprint(vs.iter().rev());
            if let (Ok(f), Ok(r)) = (fwd, rev) {
                prop_assert!((f.mean_hu - r.mean_hu).abs() < 1e-6);
                prop_assert!((f.std_hu - r.std_hu).abs() < 1e-6);
            }
        }
    }
}
