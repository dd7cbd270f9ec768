//! PNG images and indexed masks, plus overlays.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use promptseg_core::{ImageTensor, LabelMap, PromptSet};

use crate::error::{CliError, Result};

fn image_err(path: &Path, e: image::ImageError) -> CliError {
    match e {
        image::ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::load(path, other.to_string()),
    }
}

pub fn read_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(ImageTensor::new(h as usize, w as usize, pixels)?)
}

pub fn to_rgb(image: &ImageTensor) -> RgbImage {
    let raw = image.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    RgbImage::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer size matches")
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    image.save(path).map_err(|e| image_err(path, e))
}

/// Single-channel 8-bit mask whose values are category ids.
pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color().channel_count() != 1 {
        return Err(CliError::load(path, "mask must be a single-channel 8-bit image"));
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(LabelMap::from_vec(h as usize, w as usize, gray.into_raw())?)
}

pub fn write_mask(path: &Path, labels: &LabelMap) -> Result<()> {
    let img = GrayImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        Luma([labels.get(y as usize, x as usize)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Color of category `k` in overlays; background is not drawn.
pub fn category_color(k: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 57, 70],
        [42, 157, 143],
        [244, 162, 97],
        [69, 123, 157],
        [155, 93, 229],
        [233, 196, 106],
        [38, 70, 83],
    ];
    PALETTE[k % PALETTE.len()]
}

/// Blends category colors over the image and draws prompt dots.
pub fn overlay(image: &ImageTensor, labels: &LabelMap, prompts: &[PromptSet]) -> RgbImage {
    let mut out = to_rgb(image);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let k = labels.get(y as usize, x as usize) as usize;
        if k == 0 {
            continue;
        }
        let c = category_color(k);
        for ch in 0..3 {
            px.0[ch] = ((u16::from(px.0[ch]) + u16::from(c[ch])) / 2) as u8;
        }
    }
    draw_prompts(&mut out, prompts);
    out
}

/// Prompt dots (3x3, category colored with a white center) on a copy of the image.
pub fn prompt_plot(image: &ImageTensor, prompts: &[PromptSet]) -> RgbImage {
    let mut out = to_rgb(image);
    draw_prompts(&mut out, prompts);
    out
}

fn draw_prompts(img: &mut RgbImage, prompts: &[PromptSet]) {
    let (w, h) = img.dimensions();
    for set in prompts {
        let c = category_color(set.category);
        for p in &set.prompts {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
                    if x < 0 || y < 0 || x >= i64::from(w) || y >= i64::from(h) {
                        continue;
                    }
                    let color = if dx == 0 && dy == 0 { [255, 255, 255] } else { c };
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
}
