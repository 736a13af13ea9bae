//! Per-class intersection-over-union, pooled over all pixels of the evaluated set.

use serde::Serialize;

use crate::data::{LabelMask, NUM_CLASSES, OBJECT};
use crate::error::{CoreError, Result};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "object", "boundary"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` where the class is in neither prediction nor label.
    pub iou: [Option<f64>; NUM_CLASSES],
    pub intersection: [usize; NUM_CLASSES],
    pub union: [usize; NUM_CLASSES],
    pub predicted: [usize; NUM_CLASSES],
    pub labeled: [usize; NUM_CLASSES],
    pub step: usize,
    pub run_id: String,
}

impl IouReport {
    pub fn class(&self, c: u8) -> Option<f64> {
        self.iou.get(c as usize).copied().flatten()
    }

    pub fn object(&self) -> Option<f64> {
        self.class(OBJECT)
    }
}

/// Pixel counts that can be summed across images before forming ratios.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: [usize; NUM_CLASSES],
    pub predicted: [usize; NUM_CLASSES],
    pub labeled: [usize; NUM_CLASSES],
}

impl IouCounts {
    pub fn add(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(CoreError::data(format!(
                "prediction has {} pixels, label {}",
                pred.len(),
                label.len()
            )));
        }
        for (&p, &l) in pred.iter().zip(label) {
            if p as usize >= NUM_CLASSES || l as usize >= NUM_CLASSES {
                return Err(CoreError::data(format!("class out of range: pred {p}, label {l}")));
            }
            self.predicted[p as usize] += 1;
            self.labeled[l as usize] += 1;
            if p == l {
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for c in 0..NUM_CLASSES {
            self.intersection[c] += other.intersection[c];
            self.predicted[c] += other.predicted[c];
            self.labeled[c] += other.labeled[c];
        }
    }

    pub fn report(&self, step: usize, run_id: &str) -> IouReport {
        let union: [usize; NUM_CLASSES] =
            std::array::from_fn(|c| self.predicted[c] + self.labeled[c] - self.intersection[c]);
        IouReport {
            iou: std::array::from_fn(|c| (union[c] > 0).then(|| self.intersection[c] as f64 / union[c] as f64)),
            intersection: self.intersection,
            union,
            predicted: self.predicted,
            labeled: self.labeled,
            step,
            run_id: run_id.to_string(),
        }
    }
}

/// IOU of one prediction map against its label.
pub fn iou(pred: &[u8], label: &LabelMask) -> Result<IouReport> {
    let mut c = IouCounts::default();
    c.add(pred, &label.classes)?;
    Ok(c.report(0, ""))
}
