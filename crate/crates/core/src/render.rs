//! Conversions between tensors and 8-bit images, and snapshot panels.

use std::io::Cursor;

use cellseg_tensor::{Scalar, Tensor};
use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{CoreError, Result};

/// Background, object, boundary.
pub const PALETTE: [[u8; 3]; 3] = [[32, 32, 48], [240, 190, 40], [220, 60, 60]];

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn entry_rgb<T: Scalar>(t: &Tensor<T>, entry: usize, f: impl Fn(f64) -> f64) -> Result<RgbImage> {
    let (b, h, w, c) = t.shape().nhwc()?;
    if entry >= b || c < 3 {
        return Err(CoreError::data(format!(
            "cannot render entry {entry} of {}",
            t.shape()
        )));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let o = t.offset4(entry, y as usize, x as usize, 0);
        let px = &t.data()[o..o + 3];
        Rgb([
            to_u8(f(px[0].as_f64())),
            to_u8(f(px[1].as_f64())),
            to_u8(f(px[2].as_f64())),
        ])
    }))
}

/// Image tensor with values in [−0.5, 0.5].
pub fn image_to_rgb<T: Scalar>(t: &Tensor<T>, entry: usize) -> Result<RgbImage> {
    entry_rgb(t, entry, |v| v + 0.5)
}

/// Tensor with values in [0, 1], e.g. from `state_rgb`.
pub fn unit_to_rgb<T: Scalar>(t: &Tensor<T>, entry: usize) -> Result<RgbImage> {
    entry_rgb(t, entry, |v| v)
}

pub fn rgb_to_image(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&v| v as f32 / 255.0 - 0.5)
        .collect();
    Tensor::from_vec([1, h as usize, w as usize, 3], data).expect("rgb buffer")
}

pub fn prediction_rgb(classes: &[u8], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(PALETTE[classes[y as usize * w + x as usize] as usize % 3])
    })
}

/// Panels side by side with a 2-pixel white gutter, nearest-upscaled to the tallest.
pub fn hstack(panels: &[RgbImage]) -> RgbImage {
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let scaled: Vec<RgbImage> = panels
        .iter()
        .map(|p| {
            if p.height() == height || p.height() == 0 {
                p.clone()
            } else {
                let f = height / p.height();
                image::imageops::resize(
                    p,
                    p.width() * f,
                    p.height() * f,
                    image::imageops::FilterType::Nearest,
                )
            }
        })
        .collect();
    let gutter = 2;
    let width = scaled.iter().map(|p| p.width()).sum::<u32>()
        + gutter * scaled.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in &scaled {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gutter;
    }
    out
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory png encode");
    buf.into_inner()
}
