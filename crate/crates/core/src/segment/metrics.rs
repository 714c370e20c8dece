//! Confusion-matrix segmentation metrics: OA, mIoU, mAcc.

use crate::error::{Error, Result};
use crate::numerics::IGNORE_INDEX;
use serde::{Deserialize, Serialize};

/// K x K counts; rows are ground truth, columns prediction. Pixels whose
/// ground truth carries the ignore index are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= self.classes || g >= self.classes {
                return Err(Error::Contract(format!(
                    "label out of range: pred {p}, gt {g}, classes {}",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, g: usize) -> u64 {
        self.counts[g * self.classes..(g + 1) * self.classes]
            .iter()
            .sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes)
            .map(|g| self.counts[g * self.classes + p])
            .sum()
    }

    pub fn metrics(&self) -> Result<SegMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("metrics over zero scored pixels".into()));
        }
        let trace: u64 = (0..self.classes)
            .map(|c| self.counts[c * self.classes + c])
            .sum();
        let oa = trace as f64 / total as f64;

        let mut per_class_iou = vec![f64::NAN; self.classes];
        let mut iou_sum = 0.0;
        let mut iou_n = 0usize;
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        for c in 0..self.classes {
            let tp = self.counts[c * self.classes + c];
            let fn_ = self.row_sum(c) - tp;
            let fp = self.col_sum(c) - tp;
            // Classes absent from both ground truth and prediction are
            // excluded from the means.
            if tp + fn_ + fp > 0 {
                let iou = tp as f64 / (tp + fp + fn_) as f64;
                per_class_iou[c] = iou;
                iou_sum += iou;
                iou_n += 1;
            }
            if tp + fn_ > 0 {
                acc_sum += tp as f64 / (tp + fn_) as f64;
                acc_n += 1;
            }
        }
        Ok(SegMetrics {
            oa,
            miou: iou_sum / iou_n.max(1) as f64,
            macc: acc_sum / acc_n.max(1) as f64,
            per_class_iou,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegMetrics {
    pub oa: f64,
    pub miou: f64,
    pub macc: f64,
    /// NaN marks classes absent from both gt and prediction.
    pub per_class_iou: Vec<f64>,
}

/// Metrics over paired prediction/ground-truth label maps.
pub fn compute_metrics(pred_maps: &[Vec<u8>], gt_maps: &[Vec<u8>], classes: usize) -> Result<SegMetrics> {
    if pred_maps.len() != gt_maps.len() {
        return Err(Error::shape(
            "compute_metrics",
            &[pred_maps.len()],
            &[gt_maps.len()],
        ));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (pred, gt) in pred_maps.iter().zip(gt_maps) {
        cm.accumulate(pred, gt)?;
    }
    cm.metrics()
}
