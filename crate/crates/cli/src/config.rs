//! Run configuration: a versioned JSON document plus command-line overrides.

use serde::{Deserialize, Serialize};
use voxsynth_core::io::{Region, Task};
use voxsynth_core::network::{BlockKind, HeadKind, NetworkSpec, UpsampleMode};
use voxsynth_core::patching::DEFAULT_INFER_STEP;
use voxsynth_core::train::TrainConfig;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Unet,
    Resunet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Tconv,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L1afp,
}

/// `desk` keeps everything small enough for a CPU; `full` uses the
/// full-size schedules and the per-region patch presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub arch: Option<Arch>,
    pub upsample: Option<Upsample>,
    pub levels: Option<usize>,
    pub base_channels: Option<usize>,
    pub channel_cap: Option<usize>,
    pub patch_dims: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AfpSection {
    pub lambda_l1: f64,
    /// Extractor taps; all of them when absent.
    pub taps: Option<Vec<usize>>,
}

impl Default for AfpSection {
    fn default() -> Self {
        AfpSection {
            lambda_l1: voxsynth_core::losses::DEFAULT_LAMBDA_L1,
            taps: None,
        }
    }
}

/// The file format. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub region: Option<Region>,
    #[serde(default)]
    pub task: Option<u8>,
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub segmentation_network: NetworkSection,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default)]
    pub seg_train: Option<TrainConfig>,
    #[serde(default)]
    pub afp: AfpSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            scale: Scale::Desk,
            seed: 0,
            region: None,
            task: None,
            loss: None,
            step: None,
            network: NetworkSection::default(),
            segmentation_network: NetworkSection::default(),
            train: None,
            finetune: None,
            seg_train: None,
            afp: AfpSection::default(),
        }
    }
}

const TRAIN_SECTIONS: [&str; 3] = ["train", "finetune", "seg_train"];

impl RunConfig {
    /// Parses and validates a config document; errors carry the key path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::config("", format!("invalid JSON: {e}")))?;
        for section in TRAIN_SECTIONS {
            for key in ["seed", "threads"] {
                if value.get(section).and_then(|s| s.get(key)).is_some() {
                    let hint = if key == "seed" {
                        "use the top-level seed"
                    } else {
                        "use the VOXSYNTH_THREADS environment variable"
                    };
                    return Err(CliError::config(format!("{section}.{key}"), format!("not allowed here; {hint}")));
                }
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
            ));
        }
        if let Some(t) = cfg.task {
            task_from_number(t).map_err(|e| CliError::config("task", e))?;
        }
        if let Some(s) = cfg.step {
            check_step(s).map_err(|e| CliError::config("step", e))?;
        }
        for (name, section) in [("train", &cfg.train), ("finetune", &cfg.finetune), ("seg_train", &cfg.seg_train)] {
            if let Some(t) = section {
                t.validate().map_err(|e| CliError::config(name, e.to_string()))?;
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn task_from_number(n: u8) -> Result<Task, String> {
    match n {
        1 => Ok(Task::Mr2ct),
        2 => Ok(Task::Cbct2ct),
        other => Err(format!("task must be 1 (MR to CT) or 2 (CBCT to CT), got {other}")),
    }
}

pub fn task_number(t: Task) -> u8 {
    match t {
        Task::Mr2ct => 1,
        Task::Cbct2ct => 2,
    }
}

pub fn check_step(s: f64) -> Result<(), String> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(format!("step must be in (0, 1], got {s}"))
    }
}

/// Patch size per anatomical region and task.
pub fn patch_preset(region: Region, task: Task) -> [usize; 3] {
    match (region, task) {
        (Region::HN, _) => [56, 192, 192],
        (Region::AB | Region::TH, Task::Mr2ct) => [48, 192, 224],
        (Region::AB | Region::TH, Task::Cbct2ct) => [40, 224, 224],
    }
}

pub const DESK_PATCH: [usize; 3] = [16, 16, 16];

/// Flags that override config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub region: Option<Region>,
    pub task: Option<u8>,
    pub arch: Option<Arch>,
    pub upsample: Option<Upsample>,
    pub loss: Option<LossKind>,
    pub step: Option<f64>,
}

/// Everything a command needs, after defaults and overrides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub scale: Scale,
    pub seed: u64,
    pub region: Region,
    pub task: u8,
    pub loss: LossKind,
    pub step: f64,
    pub network: NetworkSpec,
    pub segmentation_network: NetworkSpec,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub seg_train: TrainConfig,
    pub afp: AfpSection,
}

fn desk_train(epochs: usize, lr0: f64) -> TrainConfig {
    TrainConfig {
        lr0,
        epochs,
        iters_per_epoch: 20,
        batch: 2,
        val_interval: 5,
        ..TrainConfig::default()
    }
}

fn resolve_network(
    s: &NetworkSection,
    scale: Scale,
    preset: [usize; 3],
    head: HeadKind,
    default_arch: Arch,
    seed: u64,
) -> NetworkSpec {
    let (levels, base, cap, patch) = match scale {
        Scale::Desk => (3, 8, 64, DESK_PATCH),
        Scale::Full => (4, 32, 320, preset),
    };
    NetworkSpec {
        levels: s.levels.unwrap_or(levels),
        base_channels: s.base_channels.unwrap_or(base),
        channel_cap: s.channel_cap.unwrap_or(cap),
        block: match s.arch.unwrap_or(default_arch) {
            Arch::Unet => BlockKind::Plain,
            Arch::Resunet => BlockKind::Residual,
        },
        upsample: match s.upsample.unwrap_or(Upsample::Tconv) {
            Upsample::Tconv => UpsampleMode::TransposedConv,
            Upsample::Trilinear => UpsampleMode::ConvTrilinear,
        },
        head,
        patch_dims: s.patch_dims.unwrap_or(patch),
        seed,
        ..NetworkSpec::default()
    }
}

impl RunConfig {
    pub fn resolve(&self, o: &Overrides) -> Result<Resolved, CliError> {
        let seed = o.seed.unwrap_or(self.seed);
        let region = o.region.or(self.region).unwrap_or(Region::AB);
        let task_n = o.task.or(self.task).unwrap_or(1);
        let task = task_from_number(task_n).map_err(CliError::Validation)?;
        let step = o.step.or(self.step).unwrap_or(DEFAULT_INFER_STEP);
        check_step(step).map_err(CliError::Validation)?;
        let preset = patch_preset(region, task);

        let mut net_section = self.network.clone();
        net_section.arch = o.arch.or(net_section.arch);
        net_section.upsample = o.upsample.or(net_section.upsample);
        let network = resolve_network(&net_section, self.scale, preset, HeadKind::Regression, Arch::Resunet, seed);
        let segmentation_network = resolve_network(
            &self.segmentation_network,
            self.scale,
            preset,
            HeadKind::Segmentation,
            Arch::Unet,
            seed.wrapping_add(2),
        );
        network.validate().map_err(|e| CliError::config("network", e.to_string()))?;
        segmentation_network
            .validate()
            .map_err(|e| CliError::config("segmentation_network", e.to_string()))?;

        let (train_default, finetune_default, seg_default) = match self.scale {
            Scale::Desk => (desk_train(50, 0.01), desk_train(20, 0.001), desk_train(30, 0.01)),
            Scale::Full => (
                TrainConfig::phase1(network.block),
                TrainConfig::afp_phase(),
                TrainConfig::phase1(BlockKind::Plain),
            ),
        };
        let with_seed = |t: &Option<TrainConfig>, d: TrainConfig, s: u64| TrainConfig {
            seed: s,
            threads: None,
            ..t.clone().unwrap_or(d)
        };
        Ok(Resolved {
            scale: self.scale,
            seed,
            region,
            task: task_n,
            loss: o.loss.or(self.loss).unwrap_or(LossKind::L1),
            step,
            train: with_seed(&self.train, train_default, seed),
            finetune: with_seed(&self.finetune, finetune_default, seed.wrapping_add(1)),
            seg_train: with_seed(&self.seg_train, seg_default, seed.wrapping_add(2)),
            network,
            segmentation_network,
            afp: self.afp.clone(),
        })
    }
}

impl Resolved {
    pub fn task(&self) -> Task {
        task_from_number(self.task).expect("validated task")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_desk_defaults() {
        let cfg = RunConfig::parse(r#"{"schema_version": 1}"#).unwrap();
        let r = cfg.resolve(&Overrides::default()).unwrap();
        assert_eq!(r.network.patch_dims, DESK_PATCH);
        assert_eq!(r.network.block, BlockKind::Residual);
        assert_eq!(r.step, 0.3);
        assert_eq!(r.train.momentum, 0.99);
        assert_eq!(r.finetune.lr0, 0.001);
        assert_eq!(r.afp.lambda_l1, 5.0);
    }

    #[test]
    fn full_scale_uses_region_presets() {
        let cfg = RunConfig::parse(r#"{"schema_version": 1, "scale": "full"}"#).unwrap();
        let case = |region, task| {
            cfg.resolve(&Overrides {
                region: Some(region),
                task: Some(task),
                ..Overrides::default()
            })
            .unwrap()
            .network
            .patch_dims
        };
        assert_eq!(case(Region::AB, 1), [48, 192, 224]);
        assert_eq!(case(Region::TH, 1), [48, 192, 224]);
        assert_eq!(case(Region::AB, 2), [40, 224, 224]);
        assert_eq!(case(Region::TH, 2), [40, 224, 224]);
        assert_eq!(case(Region::HN, 1), [56, 192, 192]);
        assert_eq!(case(Region::HN, 2), [56, 192, 192]);
        let r = cfg.resolve(&Overrides::default()).unwrap();
        assert_eq!((r.train.epochs, r.train.iters_per_epoch, r.train.batch), (1500, 150, 4));
        let unet = cfg
            .resolve(&Overrides {
                arch: Some(Arch::Unet),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(unet.train.epochs, 1000);
        assert_eq!((unet.finetune.epochs, unet.finetune.batch), (500, 2));
    }

    #[test]
    fn patch_override_wins_over_preset() {
        let cfg = RunConfig::parse(r#"{"schema_version": 1, "scale": "full", "network": {"patch_dims": [32, 64, 64]}}"#).unwrap();
        assert_eq!(cfg.resolve(&Overrides::default()).unwrap().network.patch_dims, [32, 64, 64]);
    }

    #[test]
    fn flags_override_config() {
        let cfg = RunConfig::parse(r#"{"schema_version": 1, "seed": 3, "network": {"arch": "resunet"}}"#).unwrap();
        let r = cfg
            .resolve(&Overrides {
                seed: Some(9),
                arch: Some(Arch::Unet),
                upsample: Some(Upsample::Trilinear),
                loss: Some(LossKind::L1afp),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!((r.seed, r.network.seed, r.train.seed), (9, 9, 9));
        assert_eq!(r.network.block, BlockKind::Plain);
        assert_eq!(r.network.upsample, UpsampleMode::ConvTrilinear);
        assert_eq!(r.loss, LossKind::L1afp);
    }

    fn err_key(text: &str) -> String {
        match RunConfig::parse(text).unwrap_err() {
            CliError::Config { key, .. } => key,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_key() {
        assert_eq!(err_key(r#"{"schema_version": 2}"#), "schema_version");
        assert_eq!(err_key(r#"{"schema_version": 1, "network": {"levels": "three"}}"#), "network.levels");
        assert_eq!(err_key(r#"{"schema_version": 1, "network": {"depth": 3}}"#), "network.depth");
        assert_eq!(err_key(r#"{"schema_version": 1, "train": {"batch": 0}}"#), "train");
        assert_eq!(err_key(r#"{"schema_version": 1, "train": {"seed": 4}}"#), "train.seed");
        assert_eq!(err_key(r#"{"schema_version": 1, "task": 3}"#), "task");
        assert_eq!(err_key(r#"{"schema_version": 1, "step": 1.5}"#), "step");
        assert_eq!(err_key(r#"{"scale": "desk"}"#), "");
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let cfg = RunConfig::parse(r#"{"schema_version": 1, "network": {"patch_dims": [10, 16, 16]}}"#).unwrap();
        assert!(matches!(cfg.resolve(&Overrides::default()), Err(CliError::Config { .. })));
    }
}
