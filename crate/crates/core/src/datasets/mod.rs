//! Labeled toy image data: a parametric-shape generator, IDX (MNIST layout)
//! reading and writing, stochastic augmentation and seeded mini-batching.
//!
//! Pixels live in `[-1, 1]` with `-1` as background.

mod augment;
mod batch;
mod idx;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, AugmentConfig};
pub use batch::batches;
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use synthetic::generate_synthetic;

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

/// Image geometry shared by every image of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of scalars in one flattened image.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One image stored row-major as `H × W × C` values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
    pub dims: ImageDims,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>, num_classes: usize, dims: ImageDims) -> Result<Self> {
        for (i, im) in images.iter().enumerate() {
            if im.pixels.len() != dims.len() {
                return Err(invalid(format!(
                    "image {i} has {} values, expected {}",
                    im.pixels.len(),
                    dims.len()
                )));
            }
            if im.label >= num_classes {
                return Err(invalid(format!(
                    "image {i} has label {} but only {num_classes} classes",
                    im.label
                )));
            }
        }
        Ok(Self {
            images,
            num_classes,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|im| im.label).collect()
    }

    /// Stacks the selected images into an `[indices.len(), H·W·C]` matrix.
    pub fn matrix(&self, indices: &[usize]) -> Tensor {
        let d = self.dims.len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.images[i].pixels);
        }
        Tensor::new(vec![indices.len(), d], data).expect("dataset images have uniform size")
    }

    /// Splits off every `every`-th image (indices `every-1, 2·every-1, …`) as a
    /// held-out set; returns `(train, heldout)`.
    pub fn split_holdout(&self, every: usize) -> Result<(Self, Self)> {
        if every < 2 {
            return Err(invalid(format!("holdout stride must be at least 2, got {every}")));
        }
        let (held, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|i| i % every == every - 1);
        Ok((self.subset(&train), self.subset(&held)))
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            num_classes: self.num_classes,
            dims: self.dims,
        }
    }
}
