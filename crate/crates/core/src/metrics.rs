//! Confusion matrices and IoU scores.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datamodel::{IndexMap, IGNORE_LABEL};
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; pixels whose ground truth is 255 are skipped.
    pub fn accumulate(&mut self, pred: &IndexMap, gt: &IndexMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::contract(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.classes;
        let bad = |v: u8| (v as usize) >= k;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_LABEL {
                continue;
            }
            if bad(g) || bad(p) {
                return Err(Error::contract(format!(
                    "label {} out of range for {k} classes",
                    if bad(g) { g } else { p }
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class occurs in neither ground truth nor prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over `subset`, skipping classes with an empty denominator.
    /// `None` if no class in the subset is scorable.
    pub fn miou(&self, subset: &BTreeSet<usize>) -> Option<f64> {
        let ious = self.class_iou();
        let scored: Vec<f64> = subset
            .iter()
            .filter_map(|&c| ious.get(c).copied().flatten())
            .collect();
        (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
    }

    pub fn miou_all(&self) -> Option<f64> {
        self.miou(&(0..self.classes).collect())
    }
}

/// Evaluation summary emitted by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub miou_tail: Option<f64>,
    pub class_names: Vec<String>,
    pub num_pixels: u64,
}

impl EvalReport {
    pub fn from_matrix(
        cm: &ConfusionMatrix,
        class_names: &[String],
        tail: &BTreeSet<usize>,
    ) -> Self {
        Self {
            per_class_iou: cm.class_iou(),
            miou: cm.miou_all(),
            miou_tail: cm.miou(tail),
            class_names: class_names.to_vec(),
            num_pixels: cm.total(),
        }
    }
}
