//! Directory of PNG pairs: `{index:05}_image.png` (RGB) and `{index:05}_label.png`
//! (8-bit class indices).

use std::path::Path;

use image::{GrayImage, Luma};

use super::{LabelMask, Sample};
use crate::error::{CoreError, Result};
use crate::render::{image_to_rgb, rgb_to_image};

pub fn save_png_pairs(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let img_path = dir.join(format!("{i:05}_image.png"));
        image_to_rgb(&s.image, 0)?
            .save(&img_path)
            .map_err(|e| CoreError::Image {
                path: img_path.clone(),
                source: e,
            })?;
        let (h, w) = s.extent();
        let label = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([s.label.at(y as usize, x as usize)])
        });
        let lab_path = dir.join(format!("{i:05}_label.png"));
        label.save(&lab_path).map_err(|e| CoreError::Image {
            path: lab_path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

/// Loads pairs in index order until the first missing index.
pub fn load_png_pairs(dir: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    loop {
        let i = out.len();
        let img_path = dir.join(format!("{i:05}_image.png"));
        if !img_path.exists() {
            break;
        }
        let lab_path = dir.join(format!("{i:05}_label.png"));
        let img = image::open(&img_path)
            .map_err(|e| CoreError::Image {
                path: img_path.clone(),
                source: e,
            })?
            .to_rgb8();
        let lab = image::open(&lab_path)
            .map_err(|e| CoreError::Image {
                path: lab_path.clone(),
                source: e,
            })?
            .to_luma8();
        let label = LabelMask::new(lab.height() as usize, lab.width() as usize, lab.into_raw())?;
        out.push(Sample::new(
            rgb_to_image(&img),
            label,
            img_path.display().to_string(),
        )?);
    }
    Ok(out)
}
