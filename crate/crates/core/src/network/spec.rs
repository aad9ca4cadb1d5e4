use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    TransposedConv,
    ConvTrilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One linear output channel.
    Regression,
    /// Seven logits: background plus the six compact classes.
    Segmentation,
}

impl HeadKind {
    pub fn out_channels(self) -> usize {
        match self {
            HeadKind::Regression => 1,
            HeadKind::Segmentation => 7,
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Number of resolutions, including the bottleneck.
    pub levels: usize,
    pub base_channels: usize,
    /// Channel count doubles per level up to this cap.
    pub channel_cap: usize,
    pub block: BlockKind,
    pub upsample: UpsampleMode,
    pub head: HeadKind,
    pub input_channels: usize,
    /// Training patch extent; must be divisible by `2^(levels - 1)`.
    pub patch_dims: [usize; 3],
    /// Adds the input to the regression output.
    #[serde(default)]
    pub global_skip: bool,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            levels: 3,
            base_channels: 8,
            channel_cap: 64,
            block: BlockKind::Plain,
            upsample: UpsampleMode::TransposedConv,
            head: HeadKind::Regression,
            input_channels: 1,
            patch_dims: [16, 16, 16],
            global_skip: false,
            seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Spec(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.levels > 8 {
            return Err(Error::Spec(format!("levels must be at most 8, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::Spec(format!(
                "need 0 < base_channels <= channel_cap, got {} and {}",
                self.base_channels, self.channel_cap
            )));
        }
        if self.input_channels != 1 {
            return Err(Error::Spec(format!(
                "input_channels must be 1, got {}",
                self.input_channels
            )));
        }
        if self.global_skip && self.head != HeadKind::Regression {
            return Err(Error::Spec("global_skip requires the regression head".into()));
        }
        self.check_spatial(self.patch_dims)
    }

    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Spec(format!(
                "spatial dims {dims:?} must be positive multiples of {d} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| Error::Parse(format!("network spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}
