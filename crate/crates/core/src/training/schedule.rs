use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnrollMode {
    /// Short detached unrolls over a persistent pool of states.
    MiniUnroll,
    /// Fresh states and images every step, unrolled for the full target length.
    FullUnroll,
}

/// Unroll lengths, loss onset, and reset targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnrollSchedule {
    /// Step count at which predictions should be right (T).
    pub target_steps: usize,
    /// Image age from which the loss applies (T0); defaults to T/3.
    pub loss_onset: Option<usize>,
    /// Steps per mini-unroll (K).
    pub mini_unroll: usize,
    /// Fraction of images replaced by age T.
    pub image_reset_fraction: f64,
    /// Fraction of states re-randomized by age T.
    pub state_reset_fraction: f64,
    pub mode: UnrollMode,
}

impl Default for UnrollSchedule {
    fn default() -> Self {
        UnrollSchedule {
            target_steps: 40,
            loss_onset: None,
            mini_unroll: 10,
            image_reset_fraction: 0.5,
            state_reset_fraction: 0.5,
            mode: UnrollMode::MiniUnroll,
        }
    }
}

impl UnrollSchedule {
    pub fn onset(&self) -> usize {
        self.loss_onset.unwrap_or(self.target_steps / 3)
    }

    /// Fills in derived defaults so the schedule serializes fully specified.
    pub fn resolved(mut self) -> Self {
        self.loss_onset = Some(self.onset());
        self
    }

    /// Steps per optimizer update in the current mode.
    pub fn unroll_len(&self) -> usize {
        match self.mode {
            UnrollMode::MiniUnroll => self.mini_unroll,
            UnrollMode::FullUnroll => self.target_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.mini_unroll < 1 || self.mini_unroll > self.target_steps {
            bad.push(format!(
                "mini_unroll {} must be in 1..=target_steps ({})",
                self.mini_unroll, self.target_steps
            ));
        }
        if self.onset() >= self.target_steps {
            bad.push(format!(
                "loss_onset {} must be below target_steps {}",
                self.onset(),
                self.target_steps
            ));
        }
        for (name, p) in [
            ("image_reset_fraction", self.image_reset_fraction),
            ("state_reset_fraction", self.state_reset_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{name} {p} not in [0, 1]"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CoreError::config(bad.join("; ")))
        }
    }

    /// Per-unroll `(image, state)` reset probabilities.
    pub fn reset_probs(&self) -> Result<(f64, f64)> {
        Ok((
            per_unroll_reset_prob(
                self.image_reset_fraction,
                self.mini_unroll,
                self.target_steps,
            )?,
            per_unroll_reset_prob(
                self.state_reset_fraction,
                self.mini_unroll,
                self.target_steps,
            )?,
        ))
    }
}

/// ρ = 1 − (1 − p)^(K/T): resetting each unroll with probability ρ leaves a fraction
/// `p` of entries reset after T/K unrolls.
pub fn per_unroll_reset_prob(p_target: f64, k: usize, t: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_target) {
        return Err(CoreError::config(format!(
            "reset fraction {p_target} not in [0, 1]"
        )));
    }
    if k < 1 || k > t {
        return Err(CoreError::config(format!("need 1 <= K ({k}) <= T ({t})")));
    }
    if k == t {
        return Ok(p_target);
    }
    Ok(1.0 - (1.0 - p_target).powf(k as f64 / t as f64))
}
