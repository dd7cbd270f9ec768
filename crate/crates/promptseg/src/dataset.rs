//! Indexed-mask datasets laid out as `root/{images,masks}/{split}/`.

use std::path::{Path, PathBuf};

use promptseg_core::{ImageTensor, LabelMap};

use crate::error::{CliError, Result};
use crate::imageio::{read_mask, read_rgb};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: String,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted, validated records of one split. Every image needs a mask with the
/// same file name, the same size and labels below `num_classes`.
pub fn load_dataset(root: &Path, split: &str, num_classes: usize) -> Result<Vec<DatasetRecord>> {
    if !root.is_dir() {
        return Err(CliError::load(root, "dataset root does not exist"));
    }
    let images = png_files(&root.join("images").join(split))?;
    let mask_dir = root.join("masks").join(split);
    let mut out = Vec::with_capacity(images.len());
    for image_path in images {
        let name = image_path.file_name().expect("listed files have names");
        let mask_path = mask_dir.join(name);
        if !mask_path.is_file() {
            return Err(CliError::load(&image_path, format!("missing mask {}", mask_path.display())));
        }
        let (iw, ih) = image::image_dimensions(&image_path).map_err(|e| CliError::load(&image_path, e.to_string()))?;
        let mask = read_mask(&mask_path)?;
        if (mask.width(), mask.height()) != (iw as usize, ih as usize) {
            return Err(CliError::load(
                &mask_path,
                format!("mask is {}x{} but the image is {iw}x{ih}", mask.width(), mask.height()),
            ));
        }
        if mask.max_label() as usize >= num_classes {
            return Err(CliError::load(
                &mask_path,
                format!("label {} is not below the class count {num_classes}", mask.max_label()),
            ));
        }
        out.push(DatasetRecord {
            image_path,
            mask_path,
            split: split.to_string(),
        });
    }
    Ok(out)
}

/// Center crop to `size x size`; images must be at least that large.
pub fn center_crop(image: &ImageTensor, labels: &LabelMap, size: usize) -> Option<(ImageTensor, LabelMap)> {
    let (h, w) = (image.height(), image.width());
    if h < size || w < size {
        return None;
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut px = Vec::with_capacity(size * size * 3);
    let mut lb = Vec::with_capacity(size * size);
    for y in top..top + size {
        for x in left..left + size {
            px.extend_from_slice(&image.pixel(y, x));
            lb.push(labels.get(y, x));
        }
    }
    Some((
        ImageTensor::new(size, size, px).expect("cropped pixels stay in range"),
        LabelMap::from_vec(size, size, lb).expect("crop has the right length"),
    ))
}

/// Reads a record and center-crops it to `size`.
pub fn load_sample(record: &DatasetRecord, size: usize) -> Result<(ImageTensor, LabelMap)> {
    let image = read_rgb(&record.image_path)?;
    let labels = read_mask(&record.mask_path)?;
    center_crop(&image, &labels, size).ok_or_else(|| {
        CliError::load(
            &record.image_path,
            format!("{}x{} image is smaller than the input size {size}", image.width(), image.height()),
        )
    })
}
