use image::imageops::FilterType;

use super::split::Sample;
use crate::error::{Error, Result};
use crate::types::{ImageBatch, LabelVector};

/// Fixed normalization applied to every decoded pixel in [0, 1]:
/// `(x - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Decoded images with their labels and loss masks, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBatch {
    pub images: ImageBatch,
    pub labels: Vec<LabelVector>,
    pub masks: Vec<Vec<u8>>,
    pub sample_ids: Vec<String>,
}

/// Reads one image as grayscale resized to `size`×`size`, raw 8-bit.
pub fn load_gray(sample: &Sample, size: usize) -> Result<Vec<u8>> {
    let img = image::open(&sample.image_path).map_err(|e| Error::Image {
        sample_id: sample.sample_id.clone(),
        message: format!("{}: {e}", sample.image_path.display()),
    })?;
    let gray = img.to_luma8();
    let gray = if gray.width() as usize == size && gray.height() as usize == size {
        gray
    } else {
        image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(gray.into_raw())
}

pub fn normalize_pixels(raw: &[u8]) -> Vec<f32> {
    raw.iter()
        .map(|&p| (f32::from(p) / 255.0 - PIXEL_MEAN) / PIXEL_STD)
        .collect()
}

pub fn load_batch(samples: &[Sample], indices: &[usize], image_size: usize) -> Result<LoadedBatch> {
    if image_size == 0 {
        return Err(Error::Parameter("image size must be positive".into()));
    }
    let mut data = Vec::with_capacity(indices.len() * image_size * image_size);
    let mut labels = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    let mut sample_ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples.get(i).ok_or(Error::Range {
            index: i,
            len: samples.len(),
        })?;
        data.extend(normalize_pixels(&load_gray(s, image_size)?));
        labels.push(s.labels.clone());
        masks.push(s.mask.clone());
        sample_ids.push(s.sample_id.clone());
    }
    Ok(LoadedBatch {
        images: ImageBatch::new(data, indices.len(), 1, image_size, image_size)?,
        labels,
        masks,
        sample_ids,
    })
}
