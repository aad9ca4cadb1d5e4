//! Whole-volume prediction with a trained network.

use crate::error::Result;
use crate::io::Task;
use crate::network::{argmax_channels, softmax_channels, HeadKind, Network};
use crate::patching::{sliding_window, sliding_window_volume};
use crate::preprocess::{invert_to_hu, normalize_ct, normalize_input, Fingerprint};
use crate::error::Error;
use crate::volume::Volume;

/// Regression output for an already normalized input volume.
pub fn predict_normalized(net: &Network, input: &Volume, step_fraction: f64) -> Result<Volume> {
    if net.spec().head != HeadKind::Regression {
        return Err(Error::Spec("volume prediction needs a regression head".into()));
    }
    sliding_window_volume(input, net.spec().patch_dims, step_fraction, |t| Ok(net.forward(t, false)?.0))
}

/// Label volume from a CT in HU: normalize with the CT fingerprint, average
/// per-tile class probabilities, then take the per-voxel argmax.
pub fn segment_ct(net: &Network, ct_hu: &Volume, ct_fp: &Fingerprint, step_fraction: f64) -> Result<Volume> {
    if net.spec().head != HeadKind::Segmentation {
        return Err(Error::Spec("segmentation needs a segmentation head".into()));
    }
    let x = normalize_ct(ct_hu, ct_fp)?;
    let channels = net.spec().head.out_channels();
    let probs = sliding_window(&x, net.spec().patch_dims, step_fraction, channels, |t| {
        softmax_channels(&net.forward(t, false)?.0)
    })?;
    ct_hu.like_labels(argmax_channels(&probs)?)
}

/// Raw input volume to synthetic CT in HU.
pub fn synthesize_ct(
    net: &Network,
    raw_input: &Volume,
    task: Task,
    input_fp: Option<&Fingerprint>,
    ct_fp: &Fingerprint,
    step_fraction: f64,
) -> Result<Volume> {
    let x = normalize_input(raw_input, task, input_fp)?;
    let pred = predict_normalized(net, &x, step_fraction)?;
    invert_to_hu(&pred, ct_fp)
}
