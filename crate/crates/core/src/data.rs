//! Datasets, domain shifts, label-space shifts and the annotation oracle.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, input_err, Error, Result};
use crate::rng::{normal, SeedStream};
use crate::tensor::Tensor;

/// Images `(N, C, H, W)` with values in `[0, 1]` and their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(input_err!("images must be (N, C, H, W), got {:?}", s));
        }
        if s[0] != labels.len() {
            return Err(input_err!("{} images but {} labels", s[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(input_err!("label {bad} outside [0, {})", class_names.len()));
        }
        Ok(Self { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Splits off the first `n` samples; returns `(head, tail)`.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Photometric and geometric shift applied to every image of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    pub scale: f64,
    pub invert: bool,
    pub noise_std: f64,
    /// Per-channel multipliers; empty means no tint.
    #[serde(default)]
    pub channel_tint: Vec<f64>,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, scale: 1.0, invert: false, noise_std: 0.0, channel_tint: Vec::new() }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(config_err!("shift scale must be positive, got {}", self.scale));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(config_err!("noise_std must be nonnegative"));
        }
        if !self.channel_tint.is_empty() && self.channel_tint.len() != channels {
            return Err(config_err!("channel_tint has {} entries for {channels} channels", self.channel_tint.len()));
        }
        Ok(())
    }
}

fn resample(plane: &[f64], h: usize, w: usize, rotation_deg: f64, scale: f64) -> Vec<f64> {
    let theta = rotation_deg.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for oy in 0..h {
        for ox in 0..w {
            // Inverse map: output pixel -> source coordinate.
            let (dy, dx) = ((oy as f64 - cy) / scale, (ox as f64 - cx) / scale);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[oy * w + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Applies `spec` to every image: rotation/scale about the centre (bilinear),
/// inversion, tint, seeded Gaussian noise, then clamping to `[0, 1]`.
pub fn make_shifted_domain(dataset: &LabeledDataset, spec: &ShiftSpec, seed: u64) -> Result<LabeledDataset> {
    let s = dataset.images.shape().to_vec();
    spec.validate(s[1])?;
    let (c, h, w) = (s[1], s[2], s[3]);
    let geometric = spec.rotation_deg != 0.0 || spec.scale != 1.0;
    let mut rng = SeedStream::new(seed).child("shift-noise").rng();
    let mut data = dataset.images.data().to_vec();
    for (p, plane) in data.chunks_mut(h * w).enumerate() {
        if geometric {
            let moved = resample(plane, h, w, spec.rotation_deg, spec.scale);
            plane.copy_from_slice(&moved);
        }
        let tint = spec.channel_tint.get(p % c).copied();
        for v in plane.iter_mut() {
            if spec.invert {
                *v = 1.0 - *v;
            }
            if let Some(t) = tint {
                *v *= t;
            }
            if spec.noise_std > 0.0 {
                *v += spec.noise_std * normal(&mut rng);
            }
            *v = v.clamp(0.0, 1.0);
        }
    }
    LabeledDataset::new(Tensor::new(&s, data)?, dataset.labels.clone(), dataset.class_names.clone())
}

/// Drops every sample whose class is in `removed`. Class ids are kept as is.
pub fn apply_label_shift(dataset: &LabeledDataset, removed: &[usize]) -> Result<LabeledDataset> {
    let k = dataset.num_classes();
    if let Some(&bad) = removed.iter().find(|&&c| c >= k) {
        return Err(config_err!("class {bad} is not one of the {k} classes"));
    }
    let mut distinct = removed.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() >= k {
        return Err(config_err!("removing every class leaves nothing to train on"));
    }
    let keep: Vec<usize> = (0..dataset.len()).filter(|&i| !distinct.contains(&dataset.labels[i])).collect();
    Ok(dataset.subset(&keep))
}

/// Serializable pool state for resumable runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub pool_size: usize,
    pub budget: usize,
    pub labeled_indices: Vec<usize>,
}

/// Target data split into annotated and unannotated samples.
///
/// Labels of unannotated samples are only reachable through [`Self::label`],
/// which refuses access until the sample has been annotated.
#[derive(Debug, Clone)]
pub struct TargetPool {
    dataset: LabeledDataset,
    labeled: Vec<usize>,
    is_labeled: Vec<bool>,
    budget: usize,
}

impl TargetPool {
    pub fn new(dataset: LabeledDataset, budget: usize) -> Result<Self> {
        if budget > dataset.len() {
            return Err(config_err!("budget {budget} exceeds pool size {}", dataset.len()));
        }
        let n = dataset.len();
        Ok(Self { dataset, labeled: Vec::new(), is_labeled: vec![false; n], budget })
    }

    pub fn from_manifest(dataset: LabeledDataset, manifest: &PoolManifest) -> Result<Self> {
        if manifest.pool_size != dataset.len() {
            return Err(input_err!("manifest pool size {} vs dataset {}", manifest.pool_size, dataset.len()));
        }
        let mut pool = Self::new(dataset, manifest.budget)?;
        pool.annotate(&manifest.labeled_indices)?;
        Ok(pool)
    }

    pub fn manifest(&self) -> PoolManifest {
        PoolManifest { pool_size: self.len(), budget: self.budget, labeled_indices: self.labeled.clone() }
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn budget_used(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    /// Annotated indices in annotation order.
    pub fn labeled_indices(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_labeled[i]).collect()
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.is_labeled.get(index).copied().unwrap_or(false)
    }

    pub fn images(&self) -> &Tensor {
        self.dataset.images()
    }

    pub fn gather_images(&self, indices: &[usize]) -> Tensor {
        self.dataset.images().gather_rows(indices)
    }

    pub fn label(&self, index: usize) -> Result<usize> {
        if index >= self.len() {
            return Err(input_err!("index {index} outside pool of {}", self.len()));
        }
        if !self.is_labeled[index] {
            return Err(Error::AccessViolation(index));
        }
        Ok(self.dataset.labels[index])
    }

    pub fn labels_of(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    /// Reveals labels for `indices`. Fails without side effects on any
    /// repeated, already-annotated or out-of-range index, or budget overflow.
    pub fn annotate(&mut self, indices: &[usize]) -> Result<()> {
        let mut seen = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(input_err!("index {i} outside pool of {}", self.len()));
            }
            if self.is_labeled[i] || seen.contains(&i) {
                return Err(contract_err!("index {i} is already annotated"));
            }
            seen.push(i);
        }
        let remaining = self.budget - self.labeled.len();
        if indices.len() > remaining {
            return Err(Error::Budget { requested: indices.len(), remaining });
        }
        for &i in indices {
            self.is_labeled[i] = true;
            self.labeled.push(i);
        }
        Ok(())
    }
}
