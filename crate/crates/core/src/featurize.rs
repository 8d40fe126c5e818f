//! Fixed, seeded featurizers that turn pixel images and caption strings into
//! vectors the patch predictor can score. They stand in for trained encoders.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::mixer::{ImageTensor, Layout};
use crate::rng;

/// Statistics per channel: mean, standard deviation and four quadrant means.
const STATS_PER_CHANNEL: usize = 6;

/// Projects per-patch pixel statistics to `dim` through a seeded random matrix.
#[derive(Debug, Clone)]
pub struct PatchFeaturizer {
    dim: usize,
    channels: usize,
    projection: Vec<f64>,
}

impl PatchFeaturizer {
    pub fn new(dim: usize, channels: usize, seed: u64) -> Self {
        let inputs = channels * STATS_PER_CHANNEL;
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut r = rng::seeded(seed);
        let projection = (0..dim * inputs).map(|_| r.random_range(-scale..scale)).collect();
        Self { dim, channels, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn stats(&self, image: &ImageTensor, grid: &PatchGrid, row: usize, col: usize) -> Vec<f64> {
        let c = self.channels;
        let p = grid.patch_size();
        let half = (p / 2).max(1);
        let (x0, y0, _, _) = grid.patch_rect(row, col);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut quad = vec![0.0; 4 * c];
        let mut quad_n = [0usize; 4];
        for dy in 0..p {
            for dx in 0..p {
                let q = usize::from(dy >= half) * 2 + usize::from(dx >= half);
                quad_n[q] += 1;
                for (k, v) in image.cell(y0 + dy, x0 + dx).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                    quad[q * c + k] += v;
                }
            }
        }
        let n = (p * p) as f64;
        let mut out = Vec::with_capacity(c * STATS_PER_CHANNEL);
        for k in 0..c {
            let mean = sum[k] / n;
            out.push(mean);
            out.push((sq[k] / n - mean * mean).max(0.0).sqrt());
            for q in 0..4 {
                // A 1x1 patch leaves three quadrants empty.
                out.push(if quad_n[q] == 0 { mean } else { quad[q * c + k] / quad_n[q] as f64 });
            }
        }
        out
    }

    /// One `dim`-vector per patch, row-major.
    pub fn featurize(&self, image: &ImageTensor, grid: &PatchGrid) -> Result<Vec<Vec<f64>>> {
        if image.layout() != Layout::Pixels || image.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "expected a {}-channel pixel image, got {:?} with {} channels",
                self.channels,
                image.layout(),
                image.channels()
            )));
        }
        if (image.height(), image.width()) != (grid.height(), grid.width()) {
            return Err(Error::BadDimensions {
                image: String::new(),
                height: image.height(),
                width: image.width(),
                patch: grid.patch_size(),
            });
        }
        let inputs = self.channels * STATS_PER_CHANNEL;
        let mut out = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let (r, c) = grid.patch_coords(i);
            let s = self.stats(image, grid, r, c);
            out.push(self.projection.chunks(inputs).map(|row| row.iter().zip(&s).map(|(a, b)| a * b).sum()).collect());
        }
        Ok(out)
    }
}

/// Signed hashed bag of lowercase alphanumeric tokens, L2-normalized.
/// Text without tokens maps to the zero vector.
pub fn embed_text(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut h = FnvHasher::default();
        h.write(token.to_lowercase().as_bytes());
        let h = h.finish();
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
