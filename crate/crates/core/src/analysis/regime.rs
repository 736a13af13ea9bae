//! Change-point detection on the training-time mean gate activation.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConfig {
    /// Absolute move of the rolling median that counts as a change.
    pub threshold: f64,
    /// Window as a fraction of the series length.
    pub window_fraction: f64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            threshold: 0.15,
            window_fraction: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegimeChange {
    /// Estimated step of the change (center of the detecting window).
    pub step: u64,
    /// Trailing medians one window before and after the detection point.
    pub before: f64,
    pub after: f64,
    pub window: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// First point where the trailing median over `w` samples differs by more than the
/// threshold from the trailing median one window earlier.
pub fn regime_trace(series: &[(u64, f64)], cfg: &RegimeConfig) -> Result<Option<RegimeChange>> {
    let n = series.len();
    let w = ((n as f64 * cfg.window_fraction).round() as usize).max(1);
    if n < 2 * w + 1 || n < 3 {
        return Err(CoreError::data(format!(
            "mean_gate series of {n} points too short for window {w}"
        )));
    }
    let values: Vec<f64> = series.iter().map(|p| p.1).collect();
    let trailing = |i: usize| median(&values[i + 1 - w..=i]);
    for i in (2 * w - 1)..n {
        if (trailing(i) - trailing(i - w)).abs() > cfg.threshold {
            return Ok(Some(RegimeChange {
                step: series[i - w / 2].0,
                before: trailing(i - w),
                after: trailing((i + w).min(n - 1)),
                window: w,
            }));
        }
    }
    Ok(None)
}
