//! IDX image and label files (the MNIST distribution format).
//!
//! Only the unsigned-byte element type is supported. Images are scaled to
//! `[0, 1]` on load and quantized back to bytes on save.

use std::fs;
use std::path::Path;

use sfada_core::data::LabeledDataset;
use sfada_core::Tensor;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Raw images as `(count, rows, cols, pixels)`.
pub fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(path, format!("bad image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let [n, rows, cols] = [4, 8, 12].map(|o| read_u32(&bytes, o, path).map(|v| v as usize));
    let (n, rows, cols) = (n?, rows?, cols?);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::format(path, format!("expected {} pixel bytes, found {}", n * rows * cols, body.len())));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(path, format!("bad label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = read_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} label bytes, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Loads an image/label pair as a single-channel dataset with ten digit classes
/// (or more, if the labels require it).
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(&[n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let k = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let names = (0..k).map(|c| c.to_string()).collect();
    Ok(LabeledDataset::new(images, labels, names)?)
}

/// Writes a single-channel dataset as an IDX pair. Pixels are rounded to the
/// nearest of 256 levels.
pub fn save_idx_dataset(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.images().shape();
    if shape[1] != 1 {
        return Err(Error::Config(format!("IDX export needs one channel, dataset has {}", shape[1])));
    }
    if dataset.num_classes() > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + dataset.images().numel());
    for v in [IMAGE_MAGIC, shape[0] as u32, shape[2] as u32, shape[3] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.images().data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    for v in [LABEL_MAGIC, dataset.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}
