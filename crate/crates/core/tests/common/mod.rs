//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::Rng as _;
use timix::contrastive::{ContrastiveBatch, Positive};
use timix::geometry::{BoundingBox, PatchGrid};
use timix::mixer::WindowSpec;
use timix::rng::Rng;
use timix::tpp::{ScoreMap, TppModel};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + FD_STEP;
            let up = f(&x);
            x[i] = v - FD_STEP;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm, with a floor for
/// vanishing gradients.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

pub fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

pub fn unflatten(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

/// Patch `(r, c)` is positive iff its pixel rectangle overlaps the box with positive area.
pub fn brute_labels(grid: &PatchGrid, b: &BoundingBox) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let (x0, y0, x1, y1) = grid.patch_rect(r, c);
            let ox = x1.min(b.x1) as i64 - x0.max(b.x0) as i64;
            let oy = y1.min(b.y1) as i64 - y0.max(b.y0) as i64;
            out.push(ox > 0 && oy > 0);
        }
    }
    out
}

/// Naive `h x w` window total.
pub fn naive_window_sum(map: &ScoreMap, top: usize, left: usize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for r in top..top + h {
        for c in left..left + w {
            s += map.at(r, c);
        }
    }
    s
}

/// Exhaustive argmin/argmax over every window; strict comparisons keep the
/// first row-major position on ties.
pub fn brute_select(target: &ScoreMap, source: &ScoreMap, h: usize, w: usize) -> (WindowSpec, WindowSpec) {
    let g = target.grid();
    let (mut lo, mut hi) = ((f64::INFINITY, (0, 0)), (f64::NEG_INFINITY, (0, 0)));
    for top in 0..=g.rows() - h {
        for left in 0..=g.cols() - w {
            let t = naive_window_sum(target, top, left, h, w);
            if t < lo.0 {
                lo = (t, (top, left));
            }
            let s = naive_window_sum(source, top, left, h, w);
            if s > hi.0 {
                hi = (s, (top, left));
            }
        }
    }
    (WindowSpec { top: lo.1 .0, left: lo.1 .1, h, w }, WindowSpec { top: hi.1 .0, left: hi.1 .1, h, w })
}

pub fn random_grid(rng: &mut Rng, max_cells: usize, max_patch: usize) -> PatchGrid {
    let rows = rng.random_range(2..=max_cells);
    let cols = rng.random_range(2..=max_cells);
    let p = rng.random_range(1..=max_patch);
    PatchGrid::new(rows * p, cols * p, p).unwrap()
}

/// Random map; with `quantized`, values come from a few dyadic levels so ties are exact.
pub fn random_map(rng: &mut Rng, grid: PatchGrid, quantized: bool) -> ScoreMap {
    let v = (0..grid.len())
        .map(|_| if quantized { [0.25, 0.5, 0.75][rng.random_range(0..3)] } else { rng.random_range(0.001..0.999) })
        .collect();
    ScoreMap::new(grid, v).unwrap()
}

/// Mixed pairs `(x, y)`: mix `xy` keeps `x` with weight `1 - s`, mix `yx` keeps `y`
/// with weight `1 - s`, so every text's weights sum to one.
pub fn random_mixes(rng: &mut Rng, n: usize) -> Vec<(usize, usize, f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for p in 0..n / 2 {
        let (x, y) = (2 * p, 2 * p + 1);
        let s: f64 = rng.random_range(0.05..0.6);
        out.push((x, y, 1.0 - s, s));
        out.push((y, x, 1.0 - s, s));
    }
    out
}

pub fn paired_positives(n: usize) -> Vec<Vec<Positive>> {
    (0..n).map(|i| vec![Positive::new(i, 1.0)]).collect()
}

/// Rebuilds a batch with new embeddings and the same positives.
pub fn with_embeddings(
    batch: &ContrastiveBatch,
    anchors: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
) -> ContrastiveBatch {
    ContrastiveBatch::new(anchors, candidates, batch.positives().to_vec()).unwrap()
}

pub fn random_tpp(rng: &mut Rng, d: usize, dh: usize) -> TppModel {
    TppModel::new(d, dh, rng.random())
}
