//! Procedural segmentation scenes: one textured shape on a textured background.
//!
//! Backgrounds are low-saturation tones and objects are saturated colors, both with
//! low-amplitude per-pixel noise, so a pixel's class is largely readable from its local
//! color while the boundary band needs neighborhood context.

use std::f64::consts::PI;

use cellseg_tensor::{Purpose, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use super::{LabelMask, Sample, BACKGROUND, BOUNDARY, OBJECT};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    Blob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Polygon,
        ShapeFamily::Blob,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub families: Vec<ShapeFamily>,
    pub boundary_thickness: usize,
    pub count: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel texture noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            resolution: 48,
            families: ShapeFamily::ALL.to_vec(),
            boundary_thickness: 2,
            count: 256,
            seed: 0,
            noise: 0.03,
        }
    }
}

const MIN_AREA: f64 = 0.10;
const MAX_AREA: f64 = 0.60;
const MAX_ATTEMPTS: usize = 200;

/// Implicit shape in pixel coordinates.
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        rot: f64,
    },
    /// Counter-clockwise convex polygon.
    Polygon(Vec<(f64, f64)>),
    Blob {
        cx: f64,
        cy: f64,
        r: f64,
        harmonics: Vec<(f64, f64)>,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, a, b, rot } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (rot.cos(), rot.sin());
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => (0..pts.len()).all(|i| {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
            }),
            Shape::Blob {
                cx,
                cy,
                r,
                harmonics,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let theta = dy.atan2(dx);
                let radius = r
                    * (1.0
                        + harmonics
                            .iter()
                            .enumerate()
                            .map(|(k, (amp, phase))| amp * ((k as f64 + 2.0) * theta + phase).cos())
                            .sum::<f64>());
                dx.hypot(dy) <= radius
            }
        }
    }
}

fn draw_shape(family: ShapeFamily, n: f64, rng: &mut RngStream) -> Shape {
    let area = rng_range(rng, 0.15, 0.45) * n * n;
    let cx = rng_range(rng, 0.4, 0.6) * n;
    let cy = rng_range(rng, 0.4, 0.6) * n;
    match family {
        ShapeFamily::Ellipse => {
            let aspect = rng_range(rng, 0.5, 1.0);
            let a = (area / (PI * aspect)).sqrt();
            Shape::Ellipse {
                cx,
                cy,
                a,
                b: a * aspect,
                rot: rng_range(rng, 0.0, PI),
            }
        }
        ShapeFamily::Polygon => {
            let k = 3 + rng.below(6);
            let mut angles: Vec<f64> = (0..k).map(|_| rng_range(rng, 0.0, 2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            let aspect = rng_range(rng, 0.6, 1.0);
            let rot = rng_range(rng, 0.0, PI);
            let unit: Vec<(f64, f64)> = angles
                .iter()
                .map(|t| {
                    let (u, v) = (t.cos(), aspect * t.sin());
                    (u * rot.cos() - v * rot.sin(), u * rot.sin() + v * rot.cos())
                })
                .collect();
            let unit_area = 0.5
                * (0..k)
                    .map(|i| {
                        let (x0, y0) = unit[i];
                        let (x1, y1) = unit[(i + 1) % k];
                        x0 * y1 - x1 * y0
                    })
                    .sum::<f64>();
            let s = (area / unit_area.max(1e-3)).sqrt();
            Shape::Polygon(unit.iter().map(|(x, y)| (cx + s * x, cy + s * y)).collect())
        }
        ShapeFamily::Blob => {
            let harmonics: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng_range(rng, -0.15, 0.15), rng_range(rng, 0.0, 2.0 * PI)))
                .collect();
            let energy: f64 = harmonics.iter().map(|(a, _)| a * a).sum();
            let r = (area / (PI * (1.0 + 0.5 * energy))).sqrt();
            Shape::Blob {
                cx,
                cy,
                r,
                harmonics,
            }
        }
    }
}

fn rng_range(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// Square (Chebyshev) dilation; out-of-frame pixels count as outside the set.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r).any(|d| {
                let xx = x as isize + d;
                xx >= 0 && xx < w as isize && mask[y * w + xx as usize]
            });
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).any(|d| {
                let yy = y as isize + d;
                yy >= 0 && yy < h as isize && rows[yy as usize * w + x]
            });
        }
    }
    out
}

/// Square erosion, the complement of dilating the complement.
pub fn erode(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let inv: Vec<bool> = mask.iter().map(|&m| !m).collect();
    // Out-of-frame counts as outside the object, so the complement is padded with true.
    let r = radius as isize;
    let inside = |y: isize, x: isize| {
        y < 0 || x < 0 || y >= h as isize || x >= w as isize || inv[y as usize * w + x as usize]
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let hit = (-r..=r).any(|dy| (-r..=r).any(|dx| inside(y + dy, x + dx)));
            out[y as usize * w + x as usize] = !hit;
        }
    }
    out
}

/// Three-class label: the boundary band is `dilate(O, t/2) − erode(O, t − t/2)`.
pub fn label_from_mask(mask: &[bool], h: usize, w: usize, thickness: usize) -> LabelMask {
    let outer = thickness / 2;
    let inner = thickness - outer;
    let grown = dilate(mask, h, w, outer);
    let core = erode(mask, h, w, inner);
    let classes = grown
        .iter()
        .zip(&core)
        .map(|(&g, &c)| match (g, c) {
            (_, true) => OBJECT,
            (true, false) => BOUNDARY,
            (false, false) => BACKGROUND,
        })
        .collect();
    LabelMask { h, w, classes }
}

fn texture(label: &LabelMask, object_mask: &[bool], noise: f64, rng: &mut RngStream) -> Vec<f32> {
    let tone = rng_range(rng, -0.3, 0.3);
    let bg: Vec<f64> = (0..3).map(|_| tone + rng_range(rng, -0.05, 0.05)).collect();
    // Saturated object color: a random chroma direction orthogonal to gray.
    let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let mean = v.iter().sum::<f64>() / 3.0;
    let chroma: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = chroma.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    let lum = rng_range(rng, -0.15, 0.15);
    let fg: Vec<f64> = chroma.iter().map(|c| lum + 0.3 * c / norm).collect();
    let mut out = Vec::with_capacity(label.classes.len() * 3);
    for &inside in object_mask {
        let base = if inside { &fg } else { &bg };
        for c in base {
            out.push((c + noise * rng.normal()).clamp(-0.5, 0.5) as f32);
        }
    }
    out
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    if spec.resolution < 6 {
        return Err(CoreError::data(format!(
            "synthetic resolution {} too small for a shape (min 6)",
            spec.resolution
        )));
    }
    if spec.families.is_empty() {
        return Err(CoreError::data("no shape families selected"));
    }
    let max_thickness = (spec.resolution / 8).max(1);
    if spec.boundary_thickness == 0 || spec.boundary_thickness > max_thickness {
        return Err(CoreError::data(format!(
            "boundary thickness {} must be in 1..={max_thickness}",
            spec.boundary_thickness
        )));
    }
    if !(0.0..=0.2).contains(&spec.noise) {
        return Err(CoreError::data(format!(
            "texture noise {} not in [0, 0.2]",
            spec.noise
        )));
    }
    Ok(())
}

/// Deterministic in `spec`; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    validate(spec)?;
    (0..spec.count).map(|i| synthetic_sample(spec, i)).collect()
}

pub fn synthetic_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    validate(spec)?;
    let n = spec.resolution;
    let mut rng = RngStream::for_purpose(spec.seed, Purpose::Data).substream(index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let family = spec.families[rng.below(spec.families.len())];
        let shape = draw_shape(family, n as f64, &mut rng);
        let mask: Vec<bool> = (0..n * n)
            .map(|p| shape.contains((p % n) as f64 + 0.5, (p / n) as f64 + 0.5))
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (n * n) as f64;
        if !(MIN_AREA..=MAX_AREA).contains(&frac) {
            continue;
        }
        // Keep the whole contour inside the frame.
        let margin = spec.boundary_thickness;
        let touches = (0..n * n).any(|p| {
            let (y, x) = (p / n, p % n);
            mask[p] && (y < margin || x < margin || y >= n - margin || x >= n - margin)
        });
        if touches {
            continue;
        }
        let label = label_from_mask(&mask, n, n, spec.boundary_thickness);
        if label.counts().contains(&0) {
            continue;
        }
        let pixels = texture(&label, &mask, spec.noise, &mut rng);
        let image = Tensor::from_vec([1, n, n, 3], pixels)?;
        let source = format!("synthetic:{}:{index}:{family:?}", spec.seed).to_lowercase();
        return Sample::new(image, label, source);
    }
    Err(CoreError::data(format!(
        "could not place a valid shape for sample {index} after {MAX_ATTEMPTS} attempts"
    )))
}
