//! Cross-modality CT synthesis at desk scale.
//!
//! A framework-free pipeline: VOX1 volume I/O, intensity normalization,
//! 3D U-Net and residual U-Net translation networks with hand-written
//! backward passes, L1 and anatomical feature losses computed through a
//! frozen segmentation network, SGD training, sliding-window inference with
//! mean aggregation, and intensity/segmentation metrics.

pub mod error;
pub mod inference;
pub mod io;
pub mod network;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod optim;
pub mod parallel;
pub mod patching;
pub mod preprocess;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Volume, VolumeKind, VoxelData};
