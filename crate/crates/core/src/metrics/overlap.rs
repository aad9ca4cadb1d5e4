use std::collections::BTreeMap;

use super::surface::{boundary, class_mask, squared_edt};
use crate::error::{Error, Result};
use crate::numeric::percentile_sorted;
use crate::volume::{Volume, MAX_LABEL};

fn check(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    a.label_values()?;
    b.label_values()?;
    Ok(())
}

/// Classes present in either volume.
pub fn present_classes(a: &Volume, b: &Volume) -> Result<Vec<u8>> {
    check(a, b)?;
    let mut seen = [false; MAX_LABEL as usize + 1];
    for &l in a.label_values()?.iter().chain(b.label_values()?) {
        seen[l as usize] = true;
    }
    Ok((1..=MAX_LABEL).filter(|&c| seen[c as usize]).collect())
}

pub fn dice_masks(a: &[bool], b: &[bool]) -> f64 {
    let (sa, sb) = (a.iter().filter(|&&v| v).count(), b.iter().filter(|&&v| v).count());
    if sa + sb == 0 {
        return 1.0;
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    2.0 * inter as f64 / (sa + sb) as f64
}

/// Dice for every class `1..=6`; both-empty classes score 1.
pub fn dice(pred: &Volume, reference: &Volume) -> Result<BTreeMap<u8, f64>> {
    check(pred, reference)?;
    Ok((1..=MAX_LABEL)
        .map(|c| (c, dice_masks(&class_mask(pred, c), &class_mask(reference, c))))
        .collect())
}

/// Mean of the per-class values over classes present in either volume
/// (1 when no class is present).
pub fn mean_over_present(per_class: &BTreeMap<u8, f64>, present: &[u8], empty: f64) -> f64 {
    if present.is_empty() {
        return empty;
    }
    present.iter().map(|c| per_class[c]).sum::<f64>() / present.len() as f64
}

/// Distances (mm) from every boundary voxel of `a` to the boundary of `b`.
fn directed<'a>(a_surf: &'a [bool], b_dist2: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    a_surf
        .iter()
        .zip(b_dist2)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
}

/// 95th percentile of the pooled boundary-to-boundary distances of two masks.
pub fn hd95_masks(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let (ea, eb) = (!a.iter().any(|&v| v), !b.iter().any(|&v| v));
    match (ea, eb) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let (sa, sb) = (boundary(a, dims), boundary(b, dims));
    let (da, db) = (squared_edt(&sa, dims, spacing), squared_edt(&sb, dims, spacing));
    let mut d: Vec<f64> = directed(&sa, &db).chain(directed(&sb, &da)).collect();
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 0.95)
}

/// HD95 in mm for every class `1..=6`.
pub fn hd95(pred: &Volume, reference: &Volume) -> Result<BTreeMap<u8, f64>> {
    check(pred, reference)?;
    let spacing = reference.spacing_mm().map(|s| s as f64);
    let dims = pred.dims();
    Ok((1..=MAX_LABEL)
        .map(|c| (c, hd95_masks(&class_mask(pred, c), &class_mask(reference, c), dims, spacing)))
        .collect())
}
