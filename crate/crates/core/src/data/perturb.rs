//! Image edits applied mid-run: shifts, swaps, gray patches, and noise patches.

use cellseg_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use super::{LabelMask, Sample, BACKGROUND};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn full(h: usize, w: usize) -> Self {
        Rect { x: 0, y: 0, w, h }
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > w || self.y + self.h > h {
            return Err(CoreError::data(format!(
                "rect {}x{} at ({}, {}) outside {w}x{h} frame",
                self.w, self.h, self.x, self.y
            )));
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    /// Translate image and label; vacated pixels become 0 (mid-gray) and background.
    Shift { dx: isize, dy: isize },
    /// Replace image and label.
    Swap(Box<Sample>),
    /// Set RGB to mid-gray inside the rect; the label is kept.
    GrayRegion(Rect),
    /// Add clipped Gaussian noise inside the rect.
    NoiseRegion { rect: Rect, sigma: f64 },
}

/// Applies `p`; only [`Perturbation::NoiseRegion`] draws from `rng`.
pub fn perturb(sample: &Sample, p: &Perturbation, rng: &mut RngStream) -> Result<Sample> {
    let (h, w) = sample.extent();
    match p {
        Perturbation::Shift { dx, dy } => {
            let limit = (h.min(w) / 4) as isize;
            if dx.abs() > limit || dy.abs() > limit {
                return Err(CoreError::data(format!(
                    "shift ({dx}, {dy}) exceeds a quarter of the frame ({limit})"
                )));
            }
            Ok(Sample {
                image: shift_image(&sample.image, *dx, *dy),
                label: shift_label(&sample.label, *dx, *dy),
                source: sample.source.clone(),
            })
        }
        Perturbation::Swap(other) => Ok((**other).clone()),
        Perturbation::GrayRegion(rect) => {
            rect.check(h, w)?;
            let mut out = sample.clone();
            edit_rect(&mut out.image, rect, |_| 0.0);
            Ok(out)
        }
        Perturbation::NoiseRegion { rect, sigma } => {
            rect.check(h, w)?;
            let mut out = sample.clone();
            edit_rect(&mut out.image, rect, |v| {
                (v as f64 + sigma * rng.normal()).clamp(-0.5, 0.5) as f32
            });
            Ok(out)
        }
    }
}

fn edit_rect(image: &mut Tensor<f32>, rect: &Rect, mut f: impl FnMut(f32) -> f32) {
    let w = image.dims()[2];
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            for c in 0..3 {
                let v = &mut image.data_mut()[(y * w + x) * 3 + c];
                *v = f(*v);
            }
        }
    }
}

/// `out[y][x] = in[y − dy][x − dx]`, zero where the source is out of frame.
pub fn shift_image(image: &Tensor<f32>, dx: isize, dy: isize) -> Tensor<f32> {
    let (b, h, w, c) = image.shape().nhwc().expect("rank-4 image");
    let mut out = Tensor::zeros(image.shape().clone());
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = image.offset4(n, sy as usize, sx as usize, 0);
                let dst = out.offset4(n, y, x, 0);
                let px: Vec<f32> = image.data()[src..src + c].to_vec();
                out.data_mut()[dst..dst + c].copy_from_slice(&px);
            }
        }
    }
    out
}

pub fn shift_label(label: &LabelMask, dx: isize, dy: isize) -> LabelMask {
    let (h, w) = (label.h, label.w);
    let mut out = LabelMask::filled(h, w, BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                out.classes[y * w + x] = label.at(sy as usize, sx as usize);
            }
        }
    }
    out
}
