use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `U×U` counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// From a row-major `[truth][prediction]` table.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape {
                op: "confusion_matrix",
                lhs: vec![classes, classes],
                rhs: vec![counts.len()],
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= self.classes {
                return Err(Error::Index {
                    index: v,
                    extent: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape {
                op: "confusion_matrix",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract("merging confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// OA over all samples; mAcc over classes present in the truth; mIoU
    /// over classes present in truth or prediction.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::contract("metrics of an empty confusion matrix"));
        }
        let u = self.classes;
        let tp = |c: usize| self.count(c, c) as f64;
        let truth = |c: usize| (0..u).map(|p| self.count(c, p)).sum::<u64>() as f64;
        let pred = |c: usize| (0..u).map(|t| self.count(t, c)).sum::<u64>() as f64;
        let oa = (0..u).map(tp).sum::<f64>() / total as f64;
        let supported: Vec<usize> = (0..u).filter(|&c| truth(c) > 0.0).collect();
        let macc = supported.iter().map(|&c| tp(c) / truth(c)).sum::<f64>() / supported.len() as f64;
        let present: Vec<usize> = (0..u).filter(|&c| truth(c) + pred(c) > 0.0).collect();
        let miou = present
            .iter()
            .map(|&c| tp(c) / (truth(c) + pred(c) - tp(c)))
            .sum::<f64>()
            / present.len() as f64;
        Ok(Metrics { oa, macc, miou })
    }
}
