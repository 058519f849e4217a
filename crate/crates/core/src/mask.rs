//! Integer label grids shared by the segmentation stages.

use crate::error::{Error, Result};
use crate::descriptor_store::{pixel_to_patch, FieldMeta};

/// Row-major grid of integer labels for one image.
///
/// Binary and part masks reserve label 0 for background. Raw cluster-label
/// grids use cluster indices directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub image_id: String,
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            labels,
        })
    }

    pub fn filled(image_id: impl Into<String>, height: usize, width: usize, label: u32) -> Self {
        Self {
            image_id: image_id.into(),
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbour upsampling from the patch grid of `meta` to pixels.
    pub fn upsample_to_pixels(&self, meta: &FieldMeta) -> Result<LabelMask> {
        if self.height != meta.grid_h() || self.width != meta.grid_w() {
            return Err(Error::DimMismatch {
                expected: meta.num_patches(),
                actual: self.labels.len(),
            });
        }
        let (h, w) = (meta.image_height_px as usize, meta.image_width_px as usize);
        // Nearest cells are separable, so resolve each axis once.
        let rows: Vec<usize> = (0..h)
            .map(|y| pixel_to_patch(y as f64, 0.0, meta).map(|(r, _)| r))
            .collect::<Result<_>>()?;
        let cols: Vec<usize> = (0..w)
            .map(|x| pixel_to_patch(0.0, x as f64, meta).map(|(_, c)| c))
            .collect::<Result<_>>()?;
        let mut labels = Vec::with_capacity(h * w);
        for &r in &rows {
            labels.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        LabelMask::new(self.image_id.clone(), h, w, labels)
    }
}
