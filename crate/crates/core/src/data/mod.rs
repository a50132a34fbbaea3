//! Samples, datasets, synthetic generation, disk I/O, augmentation and
//! lesion-size stratification.

mod augment;
mod io;
mod stratify;
mod synth;

use std::collections::HashSet;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, flip_horizontal, flip_vertical, rotate90, AugPolicy};
pub use io::{load_manifest, load_pairs, read_manifest, read_mask_png, write_dataset, write_manifest};
pub use stratify::{assign_splits, stratify, SizeBins};
pub use synth::{generate_dataset, generate_sample, SynthConfig};

/// One image with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// (H, W, 3) in [0, 1].
    pub image: Array3<f64>,
    /// (H, W) class indices.
    pub mask: Array2<u8>,
    /// Foreground pixels ÷ H·W.
    pub lesion_fraction: f64,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Array3<f64>, mask: Array2<u8>) -> Result<Self> {
        let (h, w, _) = image.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "image is {h}×{w} but mask is {:?}",
                mask.dim()
            )));
        }
        let lesion_fraction = foreground_fraction(&mask);
        Ok(Self {
            id: id.into(),
            image,
            mask,
            lesion_fraction,
        })
    }

    pub fn side(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

pub fn foreground_fraction(mask: &Array2<u8>) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&v| v != 0).count() as f64 / mask.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeBin {
    S,
    M,
    L,
}

impl SizeBin {
    pub const ALL: [SizeBin; 3] = [SizeBin::S, SizeBin::M, SizeBin::L];

    pub fn label(self) -> &'static str {
        match self {
            SizeBin::S => "S",
            SizeBin::M => "M",
            SizeBin::L => "L",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One JSON-lines manifest entry. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub lesion_fraction: f64,
    pub split: Option<Split>,
    pub bin: Option<SizeBin>,
}

/// Ordered samples plus their manifest. The order here is the canonical
/// sample index used for curriculum weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub manifest: Vec<ManifestRecord>,
}

impl Dataset {
    /// Wrap samples with a fresh manifest pointing at the default PNG layout.
    pub fn new(samples: Vec<SegSample>) -> Result<Self> {
        let manifest = samples
            .iter()
            .map(|s| ManifestRecord {
                id: s.id.clone(),
                image: format!("images/{}.png", s.id),
                mask: format!("masks/{}.png", s.id),
                lesion_fraction: s.lesion_fraction,
                split: None,
                bin: None,
            })
            .collect();
        Self::with_manifest(samples, manifest)
    }

    pub fn with_manifest(samples: Vec<SegSample>, manifest: Vec<ManifestRecord>) -> Result<Self> {
        if samples.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} manifest records",
                samples.len(),
                manifest.len()
            )));
        }
        let mut seen = HashSet::new();
        for (s, r) in samples.iter().zip(&manifest) {
            if s.id != r.id {
                return Err(Error::Config(format!("manifest id {} does not match sample {}", r.id, s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.lesion_fraction).collect()
    }

    /// Record bin assignments in the manifest.
    pub fn apply_bins(&mut self, bins: &SizeBins) {
        for r in &mut self.manifest {
            r.bin = bins.bin_of(&r.id);
        }
    }

    /// Indices of samples with the given split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest[i].split == Some(split)).collect()
    }

    /// New dataset holding the listed samples in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            manifest: indices.iter().map(|&i| self.manifest[i].clone()).collect(),
        }
    }

    /// Stack sample images into a (B, H, W, 3) batch.
    pub fn image_batch(&self, indices: &[usize]) -> Result<Array4<f64>> {
        let views: Vec<_> = indices.iter().map(|&i| self.samples[i].image.view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }
}
