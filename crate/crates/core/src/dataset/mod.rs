//! Paired-view samples, manifests, stratified folds and synthetic data.

mod folds;
mod manifest;
mod synthetic;

use std::collections::HashSet;

pub use folds::{stratified_kfold, FoldPlan, SplitIndices, SplitRoles};
pub use manifest::{load_manifest, save_manifest};
pub use synthetic::{generate_synthetic, SyntheticParams};

use crate::error::{Error, Result};
use crate::nn::Tensor3;
use crate::N_CLASSES;

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape {
                what: "image pixel buffer".into(),
                expected: format!("{}", height * width),
                actual: format!("{}", pixels.len()),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("pixel intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(1, self.height, self.width, self.pixels.clone())
    }
}

/// A frontal/lateral image pair with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub frontal: Image,
    pub lateral: Image,
    /// 0 non-fracture, 1 ulnar fracture, 2 radial fracture.
    pub label: usize,
    /// Per-sample difficulty override; `None` uses the class-level table.
    pub score: Option<f64>,
}

/// Ordered samples with cached class counts. Rows are numbered from 1 in
/// diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_counts: [usize; N_CLASSES],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut class_counts = [0; N_CLASSES];
        let mut ids = HashSet::with_capacity(samples.len());
        let mut size = None;
        for (row, s) in samples.iter().enumerate() {
            if s.label >= N_CLASSES {
                return Err(Error::LabelDomain {
                    row: row + 1,
                    label: s.label.to_string(),
                });
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId {
                    row: row + 1,
                    id: s.id.clone(),
                });
            }
            let dims = (s.frontal.height, s.frontal.width);
            if (s.lateral.height, s.lateral.width) != dims {
                return Err(Error::Shape {
                    what: format!("lateral view of `{}`", s.id),
                    expected: format!("{}x{}", dims.0, dims.1),
                    actual: format!("{}x{}", s.lateral.height, s.lateral.width),
                });
            }
            match size {
                None => size = Some(dims),
                Some(expected) if expected != dims => {
                    return Err(Error::Shape {
                        what: format!("images of `{}`", s.id),
                        expected: format!("{}x{}", expected.0, expected.1),
                        actual: format!("{}x{}", dims.0, dims.1),
                    })
                }
                _ => {}
            }
            class_counts[s.label] += 1;
        }
        Ok(Self { samples, class_counts })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        self.class_counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `(height, width)` shared by every image, if any sample exists.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.frontal.height, s.frontal.width))
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut class_counts = [0; N_CLASSES];
        for s in &samples {
            class_counts[s.label] += 1;
        }
        Dataset { samples, class_counts }
    }
}
