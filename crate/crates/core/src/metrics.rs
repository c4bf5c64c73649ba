//! Scene completion metrics: occupancy IoU / precision / recall and
//! per-class IoU with its mean over non-empty classes.
//!
//! Ratios whose denominator is zero score 1.0 (nothing to get wrong).
//! Masked ground-truth voxels are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::objective::LabelVolume;

pub const EMPTY_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Integer confusion counts; merging is exact and order-independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: usize,
    pub occupancy: Counts,
    /// Index `k - 1` holds class `k`; the empty class is not scored.
    pub per_class: Vec<Counts>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            occupancy: Counts::default(),
            per_class: vec![Counts::default(); classes.saturating_sub(1)],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
        if pred.dims() != truth.dims() {
            return shape_err(format!(
                "prediction dims {:?} != truth dims {:?}",
                pred.dims(),
                truth.dims()
            ));
        }
        pred.check_classes(self.classes)?;
        truth.check_classes(self.classes)?;
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if !truth.is_valid(i) {
                continue;
            }
            let (po, to) = (p != EMPTY_CLASS, t != EMPTY_CLASS);
            match (po, to) {
                (true, true) => self.occupancy.tp += 1,
                (true, false) => self.occupancy.fp += 1,
                (false, true) => self.occupancy.fn_ += 1,
                (false, false) => {}
            }
            if p == t {
                if p != EMPTY_CLASS {
                    self.per_class[p - 1].tp += 1;
                }
            } else {
                if p != EMPTY_CLASS {
                    self.per_class[p - 1].fp += 1;
                }
                if t != EMPTY_CLASS {
                    self.per_class[t - 1].fn_ += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.occupancy.add(&other.occupancy);
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
    }

    pub fn report(&self) -> MetricsReport {
        let per_class_iou: Vec<f64> = self.per_class.iter().map(Counts::iou).collect();
        MetricsReport {
            sc_iou: self.occupancy.iou(),
            miou: mean(&per_class_iou),
            precision: self.occupancy.precision(),
            recall: self.occupancy.recall(),
            per_class_iou,
            counts: self.clone(),
        }
    }
}

/// Arithmetic mean (0 for an empty slice).
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sc_iou: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    /// IoU of classes `1..C`, in order.
    pub per_class_iou: Vec<f64>,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_labels(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<Self> {
        let mut c = ConfusionCounts::new(classes);
        c.accumulate(pred, truth)?;
        Ok(c.report())
    }

    /// `sc_iou,miou,precision,recall,iou_class_1,...,iou_class_{C-1}`
    pub fn csv_header(classes: usize) -> String {
        let mut cols = vec!["sc_iou".to_string(), "miou".into(), "precision".into(), "recall".into()];
        cols.extend((1..classes).map(|k| format!("iou_class_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![self.sc_iou, self.miou, self.precision, self.recall];
        vals.extend(&self.per_class_iou);
        vals.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Shortest round-trip decimal form; locale independent.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn metric_sc_iou(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    let classes = pred.max_class().max(truth.max_class()) + 1;
    Ok(MetricsReport::from_labels(pred, truth, classes.max(2))?.sc_iou)
}

pub fn metric_ssc_miou(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<(Vec<f64>, f64)> {
    let r = MetricsReport::from_labels(pred, truth, classes)?;
    Ok((r.per_class_iou, r.miou))
}

pub fn metric_precision_recall(pred: &LabelVolume, truth: &LabelVolume) -> Result<(f64, f64)> {
    let classes = pred.max_class().max(truth.max_class()) + 1;
    let r = MetricsReport::from_labels(pred, truth, classes.max(2))?;
    Ok((r.precision, r.recall))
}
