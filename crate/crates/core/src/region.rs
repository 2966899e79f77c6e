//! Pixel-overlap metrics between a reference mask and a prediction.
//!
//! Degenerate denominators follow agreement semantics: when both masks are
//! empty IoU and Dice are 1; a class absent from the reference gets
//! TPR (or TNR) 1 and FNR (or FPR) 0.

use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Rates are fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub tpr: f64,
    pub fpr: f64,
    pub tnr: f64,
    pub fnr: f64,
    pub dice: f64,
    pub iou: f64,
}

/// Column order used for CSV/JSON output.
pub const REPORT_COLUMNS: [&str; 6] = ["tpr", "fpr", "tnr", "fnr", "dice", "iou"];

impl RegionReport {
    pub fn values(&self) -> [f64; 6] {
        [self.tpr, self.fpr, self.tnr, self.fnr, self.dice, self.iou]
    }

    pub fn column(&self, name: &str) -> Option<f64> {
        REPORT_COLUMNS
            .iter()
            .position(|c| *c == name)
            .map(|i| self.values()[i])
    }
}

/// Pixel tally of `truth` (g) against `pred` (g').
pub fn confusion_counts(truth: &BinaryMask, pred: &BinaryMask) -> Result<ConfusionCounts> {
    truth.check_same_dims(pred, "confusion_counts")?;
    let mut c = ConfusionCounts::default();
    for (&g, &p) in truth.data().iter().zip(pred.data()) {
        match (g, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn region_report(c: &ConfusionCounts) -> RegionReport {
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    RegionReport {
        tpr: ratio(c.tp, c.tp + c.fn_),
        fnr: if c.tp + c.fn_ == 0 { 0.0 } else { ratio(c.fn_, c.tp + c.fn_) },
        tnr: ratio(c.tn, c.tn + c.fp),
        fpr: if c.tn + c.fp == 0 { 0.0 } else { ratio(c.fp, c.tn + c.fp) },
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou,
    }
}

/// Convenience: counts then report.
pub fn compare_masks(truth: &BinaryMask, pred: &BinaryMask) -> Result<RegionReport> {
    Ok(region_report(&confusion_counts(truth, pred)?))
}

/// Per-field arithmetic mean.
pub fn aggregate(reports: &[RegionReport]) -> Result<RegionReport> {
    if reports.is_empty() {
        return Err(Error::Empty("no region reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mut sums = [0.0f64; 6];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    let [tpr, fpr, tnr, fnr, dice, iou] = sums.map(|s| s / n);
    Ok(RegionReport {
        tpr,
        fpr,
        tnr,
        fnr,
        dice,
        iou,
    })
}

/// Mean IoU over paired masks.
pub fn mean_iou(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    let reports = pairs
        .iter()
        .map(|(g, p)| compare_masks(g, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&reports)?.iou)
}
