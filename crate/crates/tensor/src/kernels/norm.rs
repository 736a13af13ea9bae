//! Standardization over instance, live-batch, or channel axes with a per-channel affine.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    /// Per channel over (batch, spatial), always from the live batch.
    BatchLive,
    /// Per (sample, channel) over spatial positions.
    Instance,
    /// Per (sample, pixel) over channels.
    Channel,
}

impl NormKind {
    pub fn is_none(self) -> bool {
        matches!(self, NormKind::None)
    }

    pub fn groups(self, b: usize, hw: usize, c: usize) -> usize {
        match self {
            NormKind::None => 0,
            NormKind::BatchLive => c,
            NormKind::Instance => b * c,
            NormKind::Channel => b * hw,
        }
    }

    /// Number of elements each group averages over.
    pub fn group_size(self, b: usize, hw: usize, c: usize) -> usize {
        match self {
            NormKind::None => 0,
            NormKind::BatchLive => b * hw,
            NormKind::Instance => hw,
            NormKind::Channel => c,
        }
    }
}

/// Saved per-group statistics.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `dims` is `(b, hw, c)`.
pub fn norm_forward<T: Scalar>(
    kind: NormKind,
    dims: (usize, usize, usize),
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let (b, hw, c) = dims;
    let groups = kind.groups(b, hw, c);
    let count = T::of(kind.group_size(b, hw, c) as f64);
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    for_rows(kind, b, hw, c, |row, g| {
        let xr = &x[row * c..][..c];
        match g {
            Groups::PerChannel(base) => {
                for (m, &v) in mean[base..base + c].iter_mut().zip(xr) {
                    *m += v;
                }
            }
            Groups::Single(g) => mean[g] += xr.iter().copied().sum::<T>(),
        }
    });
    mean.iter_mut().for_each(|m| *m /= count);
    for_rows(kind, b, hw, c, |row, g| {
        let xr = &x[row * c..][..c];
        match g {
            Groups::PerChannel(base) => {
                for ((s, &m), &v) in var[base..base + c]
                    .iter_mut()
                    .zip(&mean[base..base + c])
                    .zip(xr)
                {
                    *s += (v - m) * (v - m);
                }
            }
            Groups::Single(g) => {
                let m = mean[g];
                var[g] += xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
    });
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v / count + eps).sqrt())
        .collect();
    let mut out = vec![T::zero(); x.len()];
    for_rows(kind, b, hw, c, |row, g| {
        let xr = &x[row * c..][..c];
        let or = &mut out[row * c..][..c];
        for ch in 0..c {
            let g = g.at(ch);
            or[ch] = gain[ch] * ((xr[ch] - mean[g]) * inv_std[g]) + bias[ch];
        }
    });
    (out, NormStats { mean, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn norm_backward<T: Scalar>(
    kind: NormKind,
    dims: (usize, usize, usize),
    x: &[T],
    gain: &[T],
    stats: &NormStats<T>,
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_gain: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let (b, hw, c) = dims;
    let groups = kind.groups(b, hw, c);
    let count = T::of(kind.group_size(b, hw, c) as f64);
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dx = vec![T::zero(); groups];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for_rows(kind, b, hw, c, |row, g| {
        let xr = &x[row * c..][..c];
        let dr = &grad_out[row * c..][..c];
        for ch in 0..c {
            let g = g.at(ch);
            let xhat = (xr[ch] - stats.mean[g]) * stats.inv_std[g];
            let dy = dr[ch];
            let dxhat = dy * gain[ch];
            sum_d[g] += dxhat;
            sum_dx[g] += dxhat * xhat;
            gg[ch] += dy * xhat;
            gb[ch] += dy;
        }
    });
    if let Some(out) = grad_gain {
        out.iter_mut().zip(&gg).for_each(|(o, &v)| *o += v);
    }
    if let Some(out) = grad_bias {
        out.iter_mut().zip(&gb).for_each(|(o, &v)| *o += v);
    }
    let Some(gi) = grad_input else { return };
    let inv_count = T::one() / count;
    for_rows(kind, b, hw, c, |row, g| {
        let xr = &x[row * c..][..c];
        let dr = &grad_out[row * c..][..c];
        let ir = &mut gi[row * c..][..c];
        for ch in 0..c {
            let g = g.at(ch);
            let xhat = (xr[ch] - stats.mean[g]) * stats.inv_std[g];
            let dxhat = dr[ch] * gain[ch];
            ir[ch] +=
                stats.inv_std[g] * (dxhat - sum_d[g] * inv_count - xhat * sum_dx[g] * inv_count);
        }
    });
}

/// Group layout of one pixel row of `c` channels.
#[derive(Clone, Copy)]
enum Groups {
    /// Channel `ch` belongs to group `base + ch`.
    PerChannel(usize),
    /// The whole row is one group.
    Single(usize),
}

impl Groups {
    #[inline(always)]
    fn at(self, ch: usize) -> usize {
        match self {
            Groups::PerChannel(base) => base + ch,
            Groups::Single(g) => g,
        }
    }
}

fn for_rows(kind: NormKind, b: usize, hw: usize, c: usize, mut f: impl FnMut(usize, Groups)) {
    for n in 0..b {
        for p in 0..hw {
            let g = match kind {
                NormKind::None | NormKind::BatchLive => Groups::PerChannel(0),
                NormKind::Instance => Groups::PerChannel(n * c),
                NormKind::Channel => Groups::Single(n * hw + p),
            };
            f(n * hw + p, g);
        }
    }
}
