//! Validated image and label batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[B, 3, H, W]` images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let (b, c, h, w) = data.dims4()?;
        if b == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "image batch must be [B>=1, 3, H, W], got {:?}",
                data.shape()
            )));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!("image size {h}x{w} is below 8x8")));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Stack `[3, H, W]` images.
    pub fn stack(images: &[&Tensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(images.len() * first.numel());
        for img in images {
            if img.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{:?} vs {:?}", img.shape(), shape)));
            }
            data.extend_from_slice(img.data());
        }
        let mut full = vec![images.len()];
        full.extend_from_slice(&shape);
        Self::new(Tensor::new(&full, data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[2], s[3])
    }
}

/// `[B, H, W]` category indices, each `< K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    batch: usize,
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelBatch {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        labels: Vec<usize>,
        categories: usize,
    ) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "{} labels for a [{batch}, {height}, {width}] batch",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= categories) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {categories} categories"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    pub fn stack(masks: &[&[u8]], height: usize, width: usize, categories: usize) -> Result<Self> {
        let labels = masks
            .iter()
            .flat_map(|m| m.iter().map(|&v| v as usize))
            .collect();
        Self::new(masks.len(), height, width, labels, categories)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    /// Flat labels in pixel-row order (`b*H*W + y*W + x`).
    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels of image `b` as bytes.
    pub fn image(&self, b: usize) -> Vec<u8> {
        let hw = self.height * self.width;
        self.labels[b * hw..(b + 1) * hw]
            .iter()
            .map(|&l| l as u8)
            .collect()
    }

    pub fn check_matches(&self, images: &ImageBatch) -> Result<()> {
        if self.dims() != images.dims() {
            return Err(Error::Shape(format!(
                "labels {:?} do not match images {:?}",
                self.dims(),
                images.dims()
            )));
        }
        Ok(())
    }
}
