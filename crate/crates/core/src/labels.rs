//! Integer class maps.

use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::Tensor;

/// Label value excluded from supervision and evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// A row-major `H x W` map of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_mismatch("label_map", &[height * width], &[labels.len()]));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: alloc::vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour reduction to `h x w`, sampling the top-left pixel
    /// of each block.
    pub fn downsample(&self, h: usize, w: usize) -> Result<LabelMap> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(invalid("label downsample", "target grid must divide the map"));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.get(y * fy, x * fx));
            }
        }
        Ok(LabelMap {
            height: h,
            width: w,
            labels: out,
        })
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> LabelMap {
        let mut out = self.labels.clone();
        for row in out.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap {
            height: self.height,
            width: self.width,
            labels: out,
        }
    }

    /// Pixel count per class; ignored pixels are not counted.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = alloc::vec![0usize; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                hist[l as usize] += 1;
            }
        }
        hist
    }
}

/// Per-pixel argmax over the class axis of `[C,H,W]` logits. Ties go to the
/// lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Result<LabelMap> {
    if logits.rank() != 3 {
        return Err(invalid("argmax", "expects [C,H,W] logits"));
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if c > IGNORE_LABEL as usize {
        return Err(invalid("argmax", "too many classes for an 8-bit label map"));
    }
    let plane = h * w;
    let data = logits.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if data[k * plane + p] > data[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelMap {
        height: h,
        width: w,
        labels,
    })
}
