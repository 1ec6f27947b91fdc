//! Confusion-matrix segmentation metrics.
//!
//! Everything is aggregated over a whole split (one matrix for all pixels)
//! rather than averaged per image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;

/// `C × C` pixel counts; entry `(g, p)` counts pixels with ground truth `g`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes).map(<[u64]>::to_vec).collect()
    }

    /// Accumulates one prediction/ground-truth pair. Pixels whose ground
    /// truth equals `ignore` are skipped. Labels are validated before any
    /// count changes.
    pub fn update(&mut self, pred: &LabelMask, gt: &LabelMask, ignore: Option<u8>) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
            return Err(Error::shape(format!(
                "prediction {}x{}x{} vs ground truth {}x{}x{}",
                pred.n, pred.h, pred.w, gt.n, gt.h, gt.w
            )));
        }
        gt.check_labels(self.num_classes, ignore)?;
        pred.check_labels(self.num_classes, None)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if Some(g) == ignore {
                continue;
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.num_classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.num_classes).map(|g| self.get(g, c)).sum();
        (tp, col - tp, row - tp)
    }

    /// `None` when the class never occurs in ground truth or prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean over classes that occur somewhere; absent classes are skipped.
    pub fn mean_iou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::data("mean IoU undefined: no class occurs in the evaluated pixels"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::data("pixel accuracy undefined: no evaluated pixels"));
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            per_class_iou: self.per_class_iou(),
            mean_iou: self.mean_iou()?,
            pixel_accuracy: self.pixel_accuracy()?,
            confusion: self.rows(),
        })
    }
}

/// Serialized form of a matrix and its derived metrics. Absent classes have
/// `null` IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}
