//! Text-aware patch predictor.
//!
//! A three-layer MLP maps `concat(patch_feature, text)` to a relevance score in
//! `(0, 1)`. It is trained with per-patch binary cross entropy against labels
//! derived from box overlap (patch-text alignment).

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PatchGrid, PatchLabels};
use crate::rng;

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

const CHECKPOINT_FORMAT: &str = "timix-tpp";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases of the three affine layers, or a gradient with the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TppParams {
    /// `dh x 2d`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `dh x dh`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl TppParams {
    pub fn zeros(d: usize, dh: usize) -> Self {
        Self {
            w1: vec![0.0; dh * 2 * d],
            b1: vec![0.0; dh],
            w2: vec![0.0; dh * dh],
            b2: vec![0.0; dh],
            w3: vec![0.0; dh],
            b3: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened in the order `w1, b1, w2, b2, w3, b3`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.w3);
        v.push(self.b3);
        v
    }

    pub fn from_slice(d: usize, dh: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(d, dh);
        if flat.len() != p.len() {
            return Err(Error::LengthMismatch { expected: p.len(), actual: flat.len() });
        }
        let mut rest = flat;
        for dst in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2, &mut p.w3] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        p.b3 = rest[0];
        Ok(p)
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3]
    }

    fn slices(&self) -> [&[f64]; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3]
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &TppParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
        self.b3 += alpha * other.b3;
    }

    pub fn scale(&mut self, alpha: f64) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|a| *a *= alpha);
        }
        self.b3 *= alpha;
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Per-patch relevance scores for one (image, text) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    grid: PatchGrid,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(grid: PatchGrid, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), actual: scores.len() });
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, &a)| !(a.is_finite() && a > 0.0 && a < 1.0))
        {
            return Err(Error::NonFiniteScore { index, value });
        }
        Ok(Self { grid, scores })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.grid.cols() + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TppModel {
    d: usize,
    dh: usize,
    seed: u64,
    params: TppParams,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    d: usize,
    dh: usize,
    seed: u64,
    #[serde(flatten)]
    params: TppParams,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Activations of one patch, kept for the backward pass.
struct Trace {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    score: f64,
}

/// Loss and gradients of the alignment objective for one (image, text) pair.
#[derive(Debug, Clone)]
pub struct PtaGrad {
    pub loss: f64,
    pub params: TppParams,
    /// Gradient w.r.t. each patch feature.
    pub features: Vec<Vec<f64>>,
    pub text: Vec<f64>,
}

/// One training pair for the alignment objective.
#[derive(Debug, Clone)]
pub struct PtaExample {
    pub features: Vec<Vec<f64>>,
    pub text: Vec<f64>,
    pub labels: PatchLabels,
}

impl TppModel {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn new(d: usize, dh: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut params = TppParams::zeros(d, dh);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = r.random_range(-bound..=bound));
        };
        fill(&mut params.w1, 2 * d);
        fill(&mut params.b1, 2 * d);
        fill(&mut params.w2, dh);
        fill(&mut params.b2, dh);
        fill(&mut params.w3, dh);
        let mut b3 = [0.0];
        fill(&mut b3, dh);
        params.b3 = b3[0];
        Self { d, dh, seed, params }
    }

    pub fn from_params(d: usize, dh: usize, seed: u64, params: TppParams) -> Result<Self> {
        let expected = TppParams::zeros(d, dh);
        let shapes_ok = params.w1.len() == expected.w1.len()
            && params.b1.len() == dh
            && params.w2.len() == dh * dh
            && params.b2.len() == dh
            && params.w3.len() == dh;
        if !shapes_ok {
            return Err(Error::LengthMismatch { expected: expected.len(), actual: params.len() });
        }
        Ok(Self { d, dh, seed, params })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.dh
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &TppParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TppParams {
        &mut self.params
    }

    fn check_inputs(&self, features: &[Vec<f64>], text: &[f64]) -> Result<()> {
        if text.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, actual: text.len() });
        }
        if let Some(f) = features.iter().find(|f| f.len() != self.d) {
            return Err(Error::DimensionMismatch { expected: self.d, actual: f.len() });
        }
        Ok(())
    }

    /// `W1[:, d..] t + b1`, shared by every patch of one pair.
    fn text_preactivation(&self, text: &[f64]) -> Vec<f64> {
        let two_d = 2 * self.d;
        (0..self.dh)
            .map(|j| {
                let row = &self.params.w1[j * two_d + self.d..(j + 1) * two_d];
                self.params.b1[j] + dot(row, text)
            })
            .collect()
    }

    fn trace(&self, feature: &[f64], text_pre: &[f64]) -> Trace {
        let (d, dh, p) = (self.d, self.dh, &self.params);
        let z1: Vec<f64> = (0..dh).map(|j| text_pre[j] + dot(&p.w1[j * 2 * d..j * 2 * d + d], feature)).collect();
        let h1: Vec<f64> = z1.iter().copied().map(relu).collect();
        let z2: Vec<f64> = (0..dh).map(|j| p.b2[j] + dot(&p.w2[j * dh..(j + 1) * dh], &h1)).collect();
        let h2: Vec<f64> = z2.iter().copied().map(relu).collect();
        let score = sigmoid(p.b3 + dot(&p.w3, &h2));
        Trace { z1, h1, z2, h2, score }
    }

    /// Scores for a sequence of patch features against one text embedding.
    pub fn scores(&self, features: &[Vec<f64>], text: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(features, text)?;
        let text_pre = self.text_preactivation(text);
        Ok(features.iter().map(|f| self.trace(f, &text_pre).score).collect())
    }

    pub fn forward(&self, grid: &PatchGrid, features: &[Vec<f64>], text: &[f64]) -> Result<ScoreMap> {
        if features.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), actual: features.len() });
        }
        let scores = self.scores(features, text)?.into_iter().map(|a| a.clamp(SCORE_EPS, 1.0 - SCORE_EPS)).collect();
        ScoreMap::new(*grid, scores)
    }

    /// Loss plus gradients w.r.t. parameters, patch features and the text.
    pub fn pta_backward(&self, features: &[Vec<f64>], text: &[f64], labels: &PatchLabels) -> Result<PtaGrad> {
        self.check_inputs(features, text)?;
        if labels.len() != features.len() {
            return Err(Error::LengthMismatch { expected: features.len(), actual: labels.len() });
        }
        let (d, dh) = (self.d, self.dh);
        let n = features.len() as f64;
        let text_pre = self.text_preactivation(text);
        let mut grad = TppParams::zeros(d, dh);
        let mut grad_features = Vec::with_capacity(features.len());
        let mut grad_text = vec![0.0; d];
        let mut loss = 0.0;
        let p = &self.params;

        for (i, feature) in features.iter().enumerate() {
            let tr = self.trace(feature, &text_pre);
            let y = labels.target(i);
            let a = tr.score.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
            loss -= y * a.ln() + (1.0 - y) * (1.0 - a).ln();
            // Clamped scores have zero slope.
            let g3 = if tr.score == a { (tr.score - y) / n } else { 0.0 };
            if g3 == 0.0 {
                grad_features.push(vec![0.0; d]);
                continue;
            }

            grad.b3 += g3;
            let mut g2 = vec![0.0; dh];
            for j in 0..dh {
                grad.w3[j] += g3 * tr.h2[j];
                if tr.z2[j] > 0.0 {
                    g2[j] = g3 * p.w3[j];
                }
            }
            let mut g1 = vec![0.0; dh];
            for j in 0..dh {
                if g2[j] == 0.0 {
                    continue;
                }
                grad.b2[j] += g2[j];
                let row = j * dh;
                for k in 0..dh {
                    grad.w2[row + k] += g2[j] * tr.h1[k];
                    g1[k] += g2[j] * p.w2[row + k];
                }
            }
            let mut gf = vec![0.0; d];
            for j in 0..dh {
                if tr.z1[j] <= 0.0 || g1[j] == 0.0 {
                    continue;
                }
                let g = g1[j];
                grad.b1[j] += g;
                let row = j * 2 * d;
                for k in 0..d {
                    grad.w1[row + k] += g * feature[k];
                    grad.w1[row + d + k] += g * text[k];
                    gf[k] += g * p.w1[row + k];
                    grad_text[k] += g * p.w1[row + d + k];
                }
            }
            grad_features.push(gf);
        }

        Ok(PtaGrad { loss: loss / n, params: grad, features: grad_features, text: grad_text })
    }

    /// Exact gradient of [`pta_loss`] w.r.t. every parameter.
    pub fn pta_grad(&self, features: &[Vec<f64>], text: &[f64], labels: &PatchLabels) -> Result<TppParams> {
        Ok(self.pta_backward(features, text, labels)?.params)
    }

    /// Mean alignment loss over `batch`, without touching the model.
    pub fn batch_loss(&self, batch: &[PtaExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let scores = self.scores(&ex.features, &ex.text)?;
            total += bce(&scores, &ex.labels)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Summed loss and summed parameter gradient over `batch`.
    pub fn batch_grad(&self, batch: &[PtaExample]) -> Result<(f64, TppParams)> {
        let mut grad = TppParams::zeros(self.d, self.dh);
        let mut loss = 0.0;
        for ex in batch {
            let g = self.pta_backward(&ex.features, &ex.text, &ex.labels)?;
            loss += g.loss;
            grad.axpy(1.0, &g.params);
        }
        Ok((loss, grad))
    }

    /// One gradient-descent step on the mean alignment loss. Returns the loss
    /// before the update.
    pub fn pta_train_step(&mut self, batch: &[PtaExample], lr: f64) -> Result<f64> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be non-negative, got {lr}")));
        }
        if batch.is_empty() {
            return Err(Error::BatchTooSmall);
        }
        let (loss, grad) = self.batch_grad(batch)?;
        let m = batch.len() as f64;
        if lr > 0.0 {
            self.params.axpy(-lr / m, &grad);
        }
        Ok(loss / m)
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            d: self.d,
            dh: self.dh,
            seed: self.seed,
            params: self.params.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::SchemaError { line: 1, message: format!("unexpected format '{}'", ck.format) });
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: ck.version, supported: CHECKPOINT_VERSION });
        }
        Self::from_params(ck.d, ck.dh, ck.seed, ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean binary cross entropy over patches, scores clamped away from {0, 1}.
pub fn bce(scores: &[f64], labels: &PatchLabels) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), actual: scores.len() });
    }
    let mut total = 0.0;
    for (i, &a) in scores.iter().enumerate() {
        if !a.is_finite() || !(0.0..=1.0).contains(&a) {
            return Err(Error::NonFiniteScore { index: i, value: a });
        }
        let a = a.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        let y = labels.target(i);
        total -= y * a.ln() + (1.0 - y) * (1.0 - a).ln();
    }
    Ok(total / scores.len().max(1) as f64)
}

/// Patch-text alignment loss for one score map.
pub fn pta_loss(scores: &ScoreMap, labels: &PatchLabels) -> Result<f64> {
    bce(scores.scores(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn random_vecs(r: &mut rng::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(r)).collect()).collect()
    }

    /// Straight-line re-evaluation from the flat parameter vector.
    fn oracle_scores(d: usize, dh: usize, flat: &[f64], feats: &[Vec<f64>], text: &[f64]) -> Vec<f64> {
        let w1 = &flat[..dh * 2 * d];
        let b1 = &flat[dh * 2 * d..dh * 2 * d + dh];
        let o = dh * 2 * d + dh;
        let w2 = &flat[o..o + dh * dh];
        let b2 = &flat[o + dh * dh..o + dh * dh + dh];
        let o = o + dh * dh + dh;
        let w3 = &flat[o..o + dh];
        let b3 = flat[o + dh];
        feats
            .iter()
            .map(|v| {
                let x: Vec<f64> = v.iter().chain(text.iter()).copied().collect();
                let mut h1 = vec![0.0; dh];
                for j in 0..dh {
                    let mut s = b1[j];
                    for k in 0..2 * d {
                        s += w1[j * 2 * d + k] * x[k];
                    }
                    h1[j] = if s > 0.0 { s } else { 0.0 };
                }
                let mut h2 = vec![0.0; dh];
                for j in 0..dh {
                    let mut s = b2[j];
                    for k in 0..dh {
                        s += w2[j * dh + k] * h1[k];
                    }
                    h2[j] = if s > 0.0 { s } else { 0.0 };
                }
                let mut z = b3;
                for j in 0..dh {
                    z += w3[j] * h2[j];
                }
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }

    #[test]
    fn zero_model_scores_half() {
        let grid = PatchGrid::from_shape(2, 3).unwrap();
        let m = TppModel::from_params(4, 4, 0, TppParams::zeros(4, 4)).unwrap();
        let mut r = seeded(1);
        let map = m.forward(&grid, &random_vecs(&mut r, 6, 4), &[1.0; 4]).unwrap();
        assert!(map.scores().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn identical_features_identical_scores() {
        let m = TppModel::new(5, 5, 3);
        let f = vec![vec![0.3, -0.1, 2.0, 0.0, 1.0]; 9];
        let s = m.scores(&f, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!(s.iter().all(|&a| a == s[0]));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut r = seeded(11);
        for trial in 0..20 {
            let (d, dh) = (3 + trial % 4, 2 + trial % 5);
            let m = TppModel::new(d, dh, trial as u64);
            let feats = random_vecs(&mut r, 7, d);
            let text = random_vecs(&mut r, 1, d).remove(0);
            let got = m.scores(&feats, &text).unwrap();
            let want = oracle_scores(d, dh, &m.params().to_vec(), &feats, &text);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = TppModel::new(4, 4, 0);
        assert!(matches!(
            m.scores(&[vec![0.0; 3]], &[0.0; 4]),
            Err(Error::DimensionMismatch { expected: 4, actual: 3 })
        ));
        assert!(matches!(m.scores(&[vec![0.0; 4]], &[0.0; 5]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pta_loss_examples() {
        let grid = PatchGrid::from_shape(2, 2).unwrap();
        let labels = PatchLabels::new(vec![true, false, false, true]);
        let map = ScoreMap::new(grid, vec![0.5; 4]).unwrap();
        assert!((pta_loss(&map, &labels).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let two = PatchLabels::new(vec![true, false]);
        let l = bce(&[0.9, 0.1], &two).unwrap();
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);

        let confident = bce(&[1.0 - 1e-12, 1e-12], &two).unwrap();
        assert!(confident < 1e-6);
        assert!(matches!(bce(&[0.5], &two), Err(Error::LengthMismatch { .. })));
        assert!(matches!(bce(&[f64::NAN, 0.5], &two), Err(Error::NonFiniteScore { index: 0, .. })));
    }

    #[test]
    fn permuting_patches_with_labels_keeps_loss() {
        let scores = [0.2, 0.7, 0.55, 0.9];
        let labels = [true, false, true, true];
        let l1 = bce(&scores, &PatchLabels::new(labels.to_vec())).unwrap();
        let perm = [2, 0, 3, 1];
        let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let y2: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let l2 = bce(&s2, &PatchLabels::new(y2)).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_scores_have_zero_gradient() {
        let (d, dh) = (3, 3);
        let mut p = TppParams::zeros(d, dh);
        p.b3 = 60.0;
        let m = TppModel::from_params(d, dh, 0, p).unwrap();
        let mut r = seeded(5);
        let feats = random_vecs(&mut r, 4, d);
        let g = m.pta_grad(&feats, &[0.5; 3], &PatchLabels::new(vec![true; 4])).unwrap();
        assert!(g.norm() <= 1e-8);
    }

    #[test]
    fn duplicated_pair_doubles_gradient() {
        let m = TppModel::new(4, 6, 9);
        let mut r = seeded(2);
        let ex = PtaExample {
            features: random_vecs(&mut r, 5, 4),
            text: random_vecs(&mut r, 1, 4).remove(0),
            labels: PatchLabels::new(vec![true, false, true, false, false]),
        };
        let (l1, g1) = m.batch_grad(std::slice::from_ref(&ex)).unwrap();
        let (l2, g2) = m.batch_grad(&[ex.clone(), ex]).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g2.to_vec().iter().zip(g1.to_vec()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut m = TppModel::new(3, 3, 1);
        let before = m.clone();
        let mut r = seeded(3);
        let batch = vec![PtaExample {
            features: random_vecs(&mut r, 4, 3),
            text: vec![0.1, 0.2, 0.3],
            labels: PatchLabels::new(vec![true, false, false, true]),
        }];
        m.pta_train_step(&batch, 0.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let m = TppModel::new(6, 5, 42);
        let back = TppModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let mut r = seeded(8);
        let feats = random_vecs(&mut r, 10, 6);
        let text = random_vecs(&mut r, 1, 6).remove(0);
        let a = m.scores(&feats, &text).unwrap();
        let b = back.scores(&feats, &text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_version_checked() {
        let m = TppModel::new(2, 2, 0);
        let json = m.to_json().unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(TppModel::from_json(&json), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
