//! Deterministic synthetic phantoms: paired source/target volumes with labels.
//!
//! The clean source is a body ellipsoid at a baseline level plus Gaussian
//! blobs, with an optional dark ellipsoidal shell and a bright lesion sphere.
//! The target applies a monotone piecewise-linear map to the clean source and
//! paints the shell at a high bone-like value. Noise is added to the source
//! only, so the target stays a deterministic function of the clean anatomy.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_manifest, write_volume, DatasetManifest, ManifestEntry, Region, Task};
use crate::network::{BONES, ORGANS};
use crate::preprocess::{HU_MAX, HU_MIN};
use crate::volume::Volume;

/// Source value of the body outside the blobs.
pub const BODY_LEVEL: f64 = 0.3;
/// Source value inside the bone shell.
pub const SHELL_SOURCE: f64 = 0.08;
/// Target value inside the bone shell.
pub const SHELL_HU: f64 = 1200.0;
/// Scale from unit source intensities to the stored MR-like values.
pub const SOURCE_SCALE: f64 = 1000.0;
const SHELL_INNER: f64 = 0.60;
const SHELL_OUTER: f64 = 0.78;
const ORGAN_THRESHOLD: f64 = 0.2;

/// Monotone piecewise-linear map given by `(source, target)` knots, constant
/// beyond the end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub knots: Vec<(f64, f64)>,
}

impl Default for IntensityMap {
    fn default() -> Self {
        IntensityMap {
            knots: vec![(0.0, -1000.0), (0.2, -500.0), (0.3, 0.0), (0.6, 100.0), (1.0, 300.0)],
        }
    }
}

impl IntensityMap {
    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::Validation("intensity map needs at least one knot".into()));
        }
        for w in self.knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 >= w[0].1) {
                return Err(Error::Validation(format!(
                    "intensity map must be increasing in source and non-decreasing in target, got {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, s: f64) -> f64 {
        let k = &self.knots;
        if s <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if s <= w[1].0 {
                let t = (s - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        k[k.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub n_blobs: usize,
    pub bone_shell: bool,
    pub lesion: bool,
    #[serde(default)]
    pub intensity_map: IntensityMap,
    /// Standard deviation of the source noise in unit intensities.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            spacing_mm: [1.0, 1.0, 1.0],
            n_blobs: 6,
            bone_shell: true,
            lesion: true,
            intensity_map: IntensityMap::default(),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    /// MR-like input with noise.
    pub source: Volume,
    /// HU-like target.
    pub target: Volume,
    pub labels: Volume,
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn generate_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.intensity_map.validate()?;
    if spec.dims.iter().any(|&d| d < 4) {
        return Err(Error::Validation(format!("phantom dims must be at least 4, got {:?}", spec.dims)));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Validation("noise_std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let axes: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, 0.36, 0.44));
    let offset: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, -0.03, 0.03));
    let body_r = |u: [f64; 3]| -> f64 {
        (0..3).map(|a| ((u[a] - offset[a]) / axes[a]).powi(2)).sum::<f64>().sqrt()
    };
    let mut blobs = Vec::with_capacity(spec.n_blobs);
    while blobs.len() < spec.n_blobs {
        let c: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, -0.4, 0.4));
        if body_r(c) < 0.8 {
            blobs.push(Blob {
                center: c,
                sigma: uniform(&mut rng, 0.05, 0.1),
                amplitude: uniform(&mut rng, 0.25, 0.5),
            });
        }
    }
    let lesion = spec.lesion.then(|| {
        let c: [f64; 3] = loop {
            let c: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, -0.25, 0.25));
            if body_r(c) < 0.5 {
                break c;
            }
        };
        (c, uniform(&mut rng, 0.05, 0.08))
    });

    let [nz, ny, nx] = spec.dims;
    let n = nz * ny * nx;
    let mut clean = vec![0.0f64; n];
    let mut target = vec![0f32; n];
    let mut labels = vec![0u8; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let u = [
                    (z as f64 + 0.5) / nz as f64 - 0.5,
                    (y as f64 + 0.5) / ny as f64 - 0.5,
                    (x as f64 + 0.5) / nx as f64 - 0.5,
                ];
                let r = body_r(u);
                if r > 1.0 {
                    target[i] = spec.intensity_map.apply(0.0) as f32;
                    continue;
                }
                let blob: f64 = blobs
                    .iter()
                    .map(|b| {
                        let d2: f64 = (0..3).map(|a| (u[a] - b.center[a]).powi(2)).sum();
                        b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
                let mut s = BODY_LEVEL + blob;
                if blob > ORGAN_THRESHOLD {
                    labels[i] = ORGANS;
                }
                if let Some((c, rad)) = lesion {
                    let d2: f64 = (0..3).map(|a| (u[a] - c[a]).powi(2)).sum();
                    if d2 <= rad * rad {
                        s += 0.3;
                    }
                }
                let s = s.min(1.0);
                let in_shell = spec.bone_shell && (SHELL_INNER..=SHELL_OUTER).contains(&r);
                if in_shell {
                    clean[i] = SHELL_SOURCE;
                    target[i] = SHELL_HU as f32;
                    labels[i] = BONES;
                } else {
                    clean[i] = s;
                    target[i] = spec.intensity_map.apply(s).clamp(HU_MIN, HU_MAX) as f32;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let source: Vec<f32> = clean
        .iter()
        .map(|&s| {
            let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ((s + e) * SOURCE_SCALE) as f32
        })
        .collect();
    let geom = |v: Volume| v.with_spacing(spec.spacing_mm);
    Ok(PhantomPair {
        source: geom(Volume::scalar(spec.dims, source)?)?,
        target: geom(Volume::scalar(spec.dims, target)?)?,
        labels: geom(Volume::labels(spec.dims, labels)?)?,
    })
}

/// CBCT-like input derived from a pair: an attenuated copy of the target
/// with additive noise, in HU.
pub fn cbct_like(pair: &PhantomPair, noise_hu: f64, seed: u64) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_hu.max(f64::MIN_POSITIVE)).expect("finite std");
    let values = pair
        .target
        .scalars()?
        .iter()
        .map(|&t| {
            let e = if noise_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (0.85 * t as f64 - 30.0 + e).clamp(HU_MIN, HU_MAX) as f32
        })
        .collect();
    pair.target.like_scalar(values)
}

/// Per-case seeds derived from a master seed.
pub fn case_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random()).collect()
}

/// Writes `n_cases` phantoms as VOX1 files plus `manifest.json` into `dir`.
pub fn generate_dataset(
    dir: impl AsRef<Path>,
    n_cases: usize,
    template: &PhantomSpec,
    seed: u64,
    task: Task,
    region: Region,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n_cases);
    for (k, case_seed) in case_seeds(seed, n_cases).into_iter().enumerate() {
        let spec = PhantomSpec {
            seed: case_seed,
            ..template.clone()
        };
        let pair = generate_pair(&spec)?;
        let case_id = format!("SYN{k:03}");
        let path = |kind: &str| -> PathBuf { dir.join(format!("{case_id}_{kind}.vox")) };
        let input = match task {
            Task::Mr2ct => pair.source.clone(),
            Task::Cbct2ct => cbct_like(&pair, 20.0, case_seed ^ 0x5eed)?,
        };
        write_volume(&input, path("input"))?;
        write_volume(&pair.target, path("target"))?;
        write_volume(&pair.labels, path("labels"))?;
        entries.push(ManifestEntry {
            case_id: case_id.clone(),
            input_path: PathBuf::from(format!("{case_id}_input.vox")),
            target_path: PathBuf::from(format!("{case_id}_target.vox")),
            label_path: Some(PathBuf::from(format!("{case_id}_labels.vox"))),
            region,
        });
    }
    let manifest = DatasetManifest { task, entries };
    save_manifest(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::load_manifest;

    fn max(v: &Volume) -> f32 {
        v.scalars().unwrap().iter().copied().fold(f32::MIN, f32::max)
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let spec = PhantomSpec::default();
        assert_eq!(generate_pair(&spec).unwrap(), generate_pair(&spec).unwrap());
        let other = generate_pair(&PhantomSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(other, generate_pair(&spec).unwrap());
    }

    #[test]
    fn bone_shell_controls_target_maximum() {
        for seed in 0..10 {
            let on = generate_pair(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
            assert!(max(&on.target) >= 800.0);
            let off = generate_pair(&PhantomSpec {
                seed,
                bone_shell: false,
                ..PhantomSpec::default()
            })
            .unwrap();
            assert!(max(&off.target) < 400.0);
        }
    }

    #[test]
    fn label_fraction_is_calibrated() {
        for seed in 0..20 {
            for dims in [[32, 32, 32], [24, 40, 32], [64, 64, 64]] {
                let p = generate_pair(&PhantomSpec {
                    seed,
                    dims,
                    ..PhantomSpec::default()
                })
                .unwrap();
                let l = p.labels.label_values().unwrap();
                let frac = l.iter().filter(|&&c| c != 0).count() as f64 / l.len() as f64;
                assert!((0.05..=0.60).contains(&frac), "seed {seed} dims {dims:?}: {frac}");
                assert!(l.iter().all(|&c| c == 0 || c == ORGANS || c == BONES));
            }
        }
    }

    #[test]
    fn target_is_a_function_of_the_clean_source() {
        let spec = PhantomSpec::default();
        let noisy = generate_pair(&spec).unwrap();
        let quiet = generate_pair(&PhantomSpec { noise_std: 0.0, ..spec }).unwrap();
        assert_eq!(noisy.target, quiet.target);
        assert_ne!(noisy.source, quiet.source);
        let t = quiet.target.scalars().unwrap();
        assert!(t.iter().all(|&v| (-1024.0..=3071.0).contains(&v)));
    }

    #[test]
    fn intensity_map_is_validated() {
        let bad = IntensityMap {
            knots: vec![(0.0, 10.0), (1.0, 5.0)],
        };
        assert!(bad.validate().is_err());
        let m = IntensityMap::default();
        assert_eq!(m.apply(-1.0), -1000.0);
        assert!((m.apply(0.45) - 50.0).abs() < 1e-9);
        assert_eq!(m.apply(2.0), 300.0);
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            dims: [8, 8, 8],
            ..PhantomSpec::default()
        };
        let m = generate_dataset(dir.path(), 3, &spec, 7, Task::Cbct2ct, Region::AB).unwrap();
        let back = load_manifest(dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.task, m.task);
        assert!(back.entries.iter().all(|e| e.input_path.is_absolute() || e.input_path.exists()));
    }
}
