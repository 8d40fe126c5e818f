//! Image and patch coordinate arithmetic.
//!
//! Pixels and boxes are half-open rectangles `[x0, x1) x [y0, y1)`. Patches are
//! indexed in row-major order, `index = row * cols + col`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W` image split into non-overlapping `P x P` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::NonDivisible { height, width, patch });
        }
        let (rows, cols) = (height / patch, width / patch);
        if rows < 2 || cols < 2 {
            return Err(Error::GridTooSmall { rows, cols });
        }
        Ok(Self { height, width, patch })
    }

    /// Grid with unit patches, i.e. a `rows x cols` patch-feature map.
    pub fn from_shape(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Number of patches `N`.
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn patch_index(&self, row: usize, col: usize) -> Result<usize> {
        let (rows, cols) = (self.rows(), self.cols());
        if row >= rows || col >= cols {
            return Err(Error::IndexOutOfRange { row, col, rows, cols });
        }
        Ok(row * cols + col)
    }

    /// Inverse of [`patch_index`](Self::patch_index).
    pub fn patch_coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols(), index % self.cols())
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` covered by a patch.
    pub fn patch_rect(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let p = self.patch;
        (col * p, row * p, (col + 1) * p, (row + 1) * p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    fn check(&self, grid: &PatchGrid) -> Result<()> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= grid.width() && self.y1 <= grid.height() {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                width: grid.width(),
                height: grid.height(),
            })
        }
    }
}

/// Binary per-patch supervision, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabels(Vec<bool>);

impl PatchLabels {
    pub fn new(labels: Vec<bool>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn target(&self, i: usize) -> f64 {
        if self.0[i] {
            1.0
        } else {
            0.0
        }
    }
}

/// Marks every patch whose pixel rectangle shares positive area with `bbox`.
pub fn box_to_patch_labels(grid: &PatchGrid, bbox: &BoundingBox) -> Result<PatchLabels> {
    bbox.check(grid)?;
    let p = grid.patch_size();
    // Patches touching only along an edge are excluded by the half-open bounds.
    let (c0, c1) = (bbox.x0 / p, (bbox.x1 - 1) / p);
    let (r0, r1) = (bbox.y0 / p, (bbox.y1 - 1) / p);
    let mut labels = vec![false; grid.len()];
    for r in r0..=r1 {
        for c in c0..=c1 {
            labels[r * grid.cols() + c] = true;
        }
    }
    Ok(PatchLabels(labels))
}
