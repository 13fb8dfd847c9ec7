//! Confusion-matrix scores for binary change maps.

use std::fmt;

use crate::error::{Error, Result};
use crate::raster::{LabelMask, LABEL_CHANGED, LABEL_UNCHANGED};

/// Counts over defined pixels; "changed" is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// `pred` holds 0/1 decisions in row-major order; truth pixels marked
/// undefined are skipped.
pub fn confusion(pred: &[u8], truth: &LabelMask) -> Result<ConfusionMatrix> {
    if pred.len() != truth.labels().len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, truth {}x{}",
            pred.len(),
            truth.height(),
            truth.width()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth.labels()) {
        match (p == LABEL_CHANGED, t) {
            (true, LABEL_CHANGED) => cm.tp += 1,
            (true, LABEL_UNCHANGED) => cm.fp += 1,
            (false, LABEL_UNCHANGED) => cm.tn += 1,
            (false, LABEL_CHANGED) => cm.fn_ += 1,
            _ => {}
        }
    }
    if cm.total() == 0 {
        return Err(Error::Empty("truth mask has no defined pixels".into()));
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
    pub f1: f64,
    pub kappa: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn scores(cm: &ConfusionMatrix) -> Scores {
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let total = tp + fp + tn + fn_;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let oa = ratio(tp + tn, total);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    // (p_o - p_e) / (1 - p_e) scaled by N^2 and kept in integers until the last step
    let (itp, ifp, itn, ifn) = (cm.tp as i128, cm.fp as i128, cm.tn as i128, cm.fn_ as i128);
    let n = itp + ifp + itn + ifn;
    let chance = (itp + ifp) * (itp + ifn) + (itn + ifn) * (itn + ifp);
    let den = n * n - chance;
    let kappa = if den == 0 {
        0.0
    } else {
        (n * (itp + itn) - chance) as f64 / den as f64
    };
    Scores {
        precision,
        recall,
        oa,
        f1,
        kappa,
    }
}

/// `metric=value` lines with four decimals.
impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "precision={:.4}", self.precision)?;
        writeln!(f, "recall={:.4}", self.recall)?;
        writeln!(f, "oa={:.4}", self.oa)?;
        writeln!(f, "f1={:.4}", self.f1)?;
        write!(f, "kappa={:.4}", self.kappa)
    }
}

/// Convenience: confusion then scores.
pub fn evaluate(pred: &[u8], truth: &LabelMask) -> Result<Scores> {
    Ok(scores(&confusion(pred, truth)?))
}
