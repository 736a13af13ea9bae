use std::path::Path;

use cellseg_tensor::{Scalar, Tensor};
use serde::Serialize;

use crate::error::{CoreError, Result};

/// A step-indexed scalar series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSeries {
    pub name: String,
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
    pub note: String,
}

impl TraceSeries {
    pub fn new(name: impl Into<String>, note: impl Into<String>) -> Self {
        TraceSeries {
            name: name.into(),
            steps: Vec::new(),
            values: Vec::new(),
            note: note.into(),
        }
    }

    pub fn push(&mut self, step: usize, value: f64) {
        self.steps.push(step);
        self.values.push(value);
    }

    pub fn at(&self, step: usize) -> Option<f64> {
        self.steps.iter().position(|&s| s == step).map(|i| self.values[i])
    }

    /// Values with `lo <= step <= hi`.
    pub fn window(&self, lo: usize, hi: usize) -> Vec<f64> {
        self.steps
            .iter()
            .zip(&self.values)
            .filter(|(&s, _)| (lo..=hi).contains(&s))
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Sum of absolute values divided by the element count.
pub fn l1_per_dim<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / t.len().max(1) as f64
}

pub fn l1_diff_per_dim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// Writes series as columns keyed by step; a series without a value at some step
/// leaves that cell empty.
pub fn write_series_csv(path: &Path, series: &[TraceSeries]) -> Result<()> {
    let mut steps: Vec<usize> = series.iter().flat_map(|s| s.steps.iter().copied()).collect();
    steps.sort_unstable();
    steps.dedup();
    let err = |e: csv::Error| CoreError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["step".to_string()];
    header.extend(series.iter().map(|s| s.name.clone()));
    w.write_record(&header).map_err(err)?;
    for step in steps {
        let mut row = vec![step.to_string()];
        row.extend(series.iter().map(|s| s.at(step).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
