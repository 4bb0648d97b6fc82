//! Per-point confusion matrix and mIoU.

use crate::dataio::{ClassId, ClassTaxonomy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("truth has {truth} points, prediction {pred}")]
    Length { truth: usize, pred: usize },
    #[error("class id {0} out of range")]
    ClassRange(ClassId),
    #[error("every class is absent; mIoU is undefined")]
    Undefined,
}

/// Rows are ground truth, columns predictions. Column `C` counts labelled
/// points predicted as ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_id: ClassId,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IouReport {
    /// `None` for classes with no truth and no prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouReport {
    pub fn absent(&self) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c].is_none()).collect()
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_id: ClassId) -> Self {
        Self {
            num_classes,
            ignore_id,
            counts: vec![0; num_classes * (num_classes + 1)],
        }
    }

    pub fn for_taxonomy(t: &ClassTaxonomy) -> Self {
        Self::new(t.num_classes(), t.ignore_id())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: ClassId, pred: ClassId) -> u64 {
        let col = if pred == self.ignore_id { self.num_classes } else { pred };
        self.counts[truth * (self.num_classes + 1) + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truth: &[ClassId], pred: &[ClassId]) -> Result<(), EvalError> {
        if truth.len() != pred.len() {
            return Err(EvalError::Length {
                truth: truth.len(),
                pred: pred.len(),
            });
        }
        let c = self.num_classes;
        for &id in truth.iter().chain(pred) {
            if id >= c && id != self.ignore_id {
                return Err(EvalError::ClassRange(id));
            }
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == self.ignore_id {
                continue;
            }
            let col = if p == self.ignore_id { c } else { p };
            self.counts[t * (c + 1) + col] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merging matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn miou(&self) -> Result<IouReport, EvalError> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[k * (c + 1) + k];
                let row: u64 = self.counts[k * (c + 1)..(k + 1) * (c + 1)].iter().sum();
                let col: u64 = (0..c).map(|t| self.counts[t * (c + 1) + k]).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(EvalError::Undefined);
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport { per_class, miou })
    }
}
