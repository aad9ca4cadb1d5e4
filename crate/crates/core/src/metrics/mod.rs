//! Intensity metrics (MAE, PSNR, SSIM, MS-SSIM) and segmentation metrics
//! (Dice, HD95) with their report format.

mod intensity;
mod overlap;
mod surface;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::segment_ct;
use crate::network::Network;
use crate::preprocess::Fingerprint;
use crate::volume::{Volume, MAX_LABEL};

pub use intensity::{mae, ms_ssim, ms_ssim_scales, psnr, ssim, DYNAMIC_RANGE, MS_SSIM_WEIGHTS, SSIM_SIGMA, SSIM_WINDOW};
pub use overlap::{dice, dice_masks, hd95, hd95_masks, mean_over_present, present_classes};
pub use surface::{boundary, squared_edt, surface_points};

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn to_repr(v: f64) -> impl Serialize {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub fn from_repr<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(d)
    }

    pub mod map {
        use std::collections::BTreeMap;

        use serde::ser::SerializeMap;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(m: &BTreeMap<u8, f64>, s: S) -> Result<S::Ok, S::Error> {
            let mut out = s.serialize_map(Some(m.len()))?;
            for (k, v) in m {
                out.serialize_entry(k, &super::to_repr(*v))?;
            }
            out.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u8, f64>, D::Error> {
            #[derive(Deserialize)]
            struct W(#[serde(deserialize_with = "super::from_repr")] f64);
            let m = BTreeMap::<u8, W>::deserialize(d)?;
            Ok(m.into_iter().map(|(k, W(v))| (k, v)).collect())
        }
    }
}

/// Metrics of one case. Segmentation fields are empty when no
/// segmentation network was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub mae: f64,
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    #[serde(default, with = "lenient_f64::map")]
    pub dice_per_class: BTreeMap<u8, f64>,
    #[serde(with = "lenient_f64")]
    pub dice_mean: f64,
    #[serde(default, with = "lenient_f64::map")]
    pub hd95_per_class: BTreeMap<u8, f64>,
    #[serde(with = "lenient_f64")]
    pub hd95_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "lenient_f64")]
    pub mean: f64,
    #[serde(with = "lenient_f64")]
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; non-finite inputs propagate to the mean.
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if mean.is_finite() {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            f64::NAN
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_case: BTreeMap<String, CaseMetrics>,
    pub aggregate: BTreeMap<String, MeanStd>,
}

const SCALAR_METRICS: [&str; 6] = ["mae", "psnr", "ssim", "ms_ssim", "dice_mean", "hd95_mean"];

fn scalar(m: &CaseMetrics, key: &str) -> f64 {
    match key {
        "mae" => m.mae,
        "psnr" => m.psnr,
        "ssim" => m.ssim,
        "ms_ssim" => m.ms_ssim,
        "dice_mean" => m.dice_mean,
        "hd95_mean" => m.hd95_mean,
        _ => unreachable!("unknown metric {key}"),
    }
}

impl MetricReport {
    pub fn insert(&mut self, case_id: impl Into<String>, m: CaseMetrics) {
        self.per_case.insert(case_id.into(), m);
        self.aggregate = self.recompute_aggregate();
    }

    /// Mean and standard deviation per metric across cases.
    pub fn recompute_aggregate(&self) -> BTreeMap<String, MeanStd> {
        SCALAR_METRICS
            .iter()
            .map(|&k| {
                let v: Vec<f64> = self.per_case.values().map(|m| scalar(m, k)).collect();
                (k.to_string(), MeanStd::of(&v))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::Parse(format!("metric report: {e}")))
    }

    /// One row per case: scalar metrics then per-class Dice and HD95.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case_id");
        for k in SCALAR_METRICS {
            write!(out, "\t{k}").unwrap();
        }
        for c in 1..=MAX_LABEL {
            write!(out, "\tdice_{c}").unwrap();
        }
        for c in 1..=MAX_LABEL {
            write!(out, "\thd95_{c}").unwrap();
        }
        out.push('\n');
        let cell = |v: Option<&f64>| v.map_or_else(String::new, |v| format!("{v}"));
        for (id, m) in &self.per_case {
            out.push_str(id);
            for k in SCALAR_METRICS {
                write!(out, "\t{}", scalar(m, k)).unwrap();
            }
            for c in 1..=MAX_LABEL {
                write!(out, "\t{}", cell(m.dice_per_class.get(&c))).unwrap();
            }
            for c in 1..=MAX_LABEL {
                write!(out, "\t{}", cell(m.hd95_per_class.get(&c))).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Segmentation network used to label both CT volumes before comparing them.
#[derive(Debug, Clone, Copy)]
pub struct SegmentationEvaluator<'a> {
    pub net: &'a Network,
    pub ct_fingerprint: &'a Fingerprint,
    pub step_fraction: f64,
}

/// Dice and HD95 between two label volumes, with class means taken over the
/// classes present in either.
pub fn segmentation_metrics(pred: &Volume, reference: &Volume) -> Result<(BTreeMap<u8, f64>, f64, BTreeMap<u8, f64>, f64)> {
    let present = present_classes(pred, reference)?;
    let d = dice(pred, reference)?;
    let h = hd95(pred, reference)?;
    let dm = mean_over_present(&d, &present, 1.0);
    let hm = mean_over_present(&h, &present, 0.0);
    Ok((d, dm, h, hm))
}

/// Intensity metrics on HU volumes plus, with a segmentation network, Dice
/// and HD95 between its labelings of the predicted and reference CT.
pub fn evaluate_case(pred_ct: &Volume, ref_ct: &Volume, seg: Option<&SegmentationEvaluator<'_>>) -> Result<CaseMetrics> {
    let mut m = CaseMetrics {
        mae: mae(pred_ct, ref_ct, None)?,
        psnr: psnr(pred_ct, ref_ct)?,
        ssim: ssim(pred_ct, ref_ct)?,
        ms_ssim: ms_ssim(pred_ct, ref_ct)?,
        dice_per_class: BTreeMap::new(),
        dice_mean: f64::NAN,
        hd95_per_class: BTreeMap::new(),
        hd95_mean: f64::NAN,
    };
    if let Some(s) = seg {
        let lp = segment_ct(s.net, pred_ct, s.ct_fingerprint, s.step_fraction)?;
        let lr = segment_ct(s.net, ref_ct, s.ct_fingerprint, s.step_fraction)?;
        let (d, dm, h, hm) = segmentation_metrics(&lp, &lr)?;
        m.dice_per_class = d;
        m.dice_mean = dm;
        m.hd95_per_class = h;
        m.hd95_mean = hm;
    }
    Ok(m)
}
