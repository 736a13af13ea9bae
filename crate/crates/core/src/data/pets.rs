//! Oxford-IIIT Pet ingestion: `images/*.jpg` with `annotations/trimaps/*.png`.
//!
//! Trimap codes follow the dataset README: 1 = foreground (object), 2 = background,
//! 3 = not classified (the boundary band).

use std::path::Path;

use cellseg_tensor::Tensor;

use super::{LabelMask, Sample, BACKGROUND, BOUNDARY, OBJECT};
use crate::error::{CoreError, Result};

#[derive(Debug, Default)]
pub struct PetsSplit {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    /// `(file, reason)` for every file that could not be used.
    pub skipped: Vec<(String, String)>,
}

pub fn trimap_class(code: u8) -> Option<u8> {
    match code {
        1 => Some(OBJECT),
        2 => Some(BACKGROUND),
        3 => Some(BOUNDARY),
        _ => None,
    }
}

/// Box-filter resample of an interleaved RGB buffer, weighting each source pixel by its
/// overlap with the destination cell.
pub fn area_resample(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let weights = |s: usize, d: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = s as f64 / d as f64;
        (0..d)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < s {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let (wx, wy) = (weights(sw, dw), weights(sh, dh));
    let mut out = vec![0.0f32; dw * dh * 3];
    for (oy, ty) in wy.iter().enumerate() {
        for (ox, tx) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(iy, fy) in ty {
                for &(ix, fx) in tx {
                    let p = (iy * sw + ix) * 3;
                    for c in 0..3 {
                        acc[c] += fy * fx * src[p + c] as f64;
                    }
                }
            }
            for c in 0..3 {
                out[(oy * dw + ox) * 3 + c] = acc[c] as f32;
            }
        }
    }
    out
}

/// Nearest neighbour on pixel centres.
pub fn nearest_resample(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(dw * dh);
    for oy in 0..dh {
        let iy = (((oy as f64 + 0.5) * sh as f64 / dh as f64) as usize).min(sh - 1);
        for ox in 0..dw {
            let ix = (((ox as f64 + 0.5) * sw as f64 / dw as f64) as usize).min(sw - 1);
            out.push(src[iy * sw + ix]);
        }
    }
    out
}

/// Loads one image/trimap pair resampled to `res × res`.
pub fn load_pair(image: &Path, trimap: &Path, res: usize) -> Result<Sample> {
    let img = image::open(image)
        .map_err(|e| CoreError::Image {
            path: image.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let tri = image::open(trimap)
        .map_err(|e| CoreError::Image {
            path: trimap.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    if (tri.width() as usize, tri.height() as usize) != (sw, sh) {
        return Err(CoreError::data(format!(
            "trimap {}x{} does not match image {sw}x{sh}",
            tri.width(),
            tri.height()
        )));
    }
    let rgb: Vec<f32> = img
        .as_raw()
        .iter()
        .map(|&v| v as f32 / 255.0 - 0.5)
        .collect();
    let pixels = area_resample(&rgb, sw, sh, res, res);
    let codes = nearest_resample(tri.as_raw(), sw, sh, res, res);
    let classes = codes
        .iter()
        .map(|&c| {
            trimap_class(c).ok_or_else(|| CoreError::data(format!("unknown trimap code {c}")))
        })
        .collect::<Result<Vec<u8>>>()?;
    Sample::new(
        Tensor::from_vec([1, res, res, 3], pixels)?,
        LabelMask::new(res, res, classes)?,
        image.display().to_string(),
    )
}

fn read_list(path: &Path) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_whitespace().next().map(str::to_string))
            .collect(),
    )
}

/// Uses `annotations/trainval.txt` / `annotations/test.txt` when present, otherwise
/// alternates sorted stems between the splits.
pub fn load_pets(root: &Path, res: usize) -> Result<PetsSplit> {
    let images = root.join("images");
    let trimaps = root.join("annotations").join("trimaps");
    let (train_stems, eval_stems) = match (
        read_list(&root.join("annotations").join("trainval.txt")),
        read_list(&root.join("annotations").join("test.txt")),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            let mut stems: Vec<String> = std::fs::read_dir(&images)
                .map_err(|e| CoreError::io(&images, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    let ext = p.extension()?.to_str()?.to_ascii_lowercase();
                    matches!(ext.as_str(), "jpg" | "jpeg" | "png")
                        .then(|| p.file_stem()?.to_str().map(str::to_string))
                        .flatten()
                })
                .collect();
            stems.sort();
            let (a, b): (Vec<_>, Vec<_>) =
                stems.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
            (
                a.into_iter().map(|x| x.1).collect(),
                b.into_iter().map(|x| x.1).collect(),
            )
        }
    };
    let mut out = PetsSplit::default();
    for (stems, train) in [(train_stems, true), (eval_stems, false)] {
        for stem in stems {
            let image = ["jpg", "jpeg", "png"]
                .iter()
                .map(|ext| images.join(format!("{stem}.{ext}")))
                .find(|p| p.exists());
            let Some(image) = image else {
                out.skipped
                    .push((stem.clone(), "image file missing".into()));
                continue;
            };
            match load_pair(&image, &trimaps.join(format!("{stem}.png")), res) {
                Ok(s) if train => out.train.push(s),
                Ok(s) => out.eval.push(s),
                Err(e) => out.skipped.push((stem, e.to_string())),
            }
        }
    }
    if out.train.is_empty() || out.eval.is_empty() {
        return Err(CoreError::data(format!(
            "pets under {} produced {} train / {} eval samples ({} skipped)",
            root.display(),
            out.train.len(),
            out.eval.len(),
            out.skipped.len()
        )));
    }
    log::info!(
        "pets: {} train, {} eval, {} skipped",
        out.train.len(),
        out.eval.len(),
        out.skipped.len()
    );
    Ok(out)
}
