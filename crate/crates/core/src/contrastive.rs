//! Similarity scoring and contrastive losses with analytic gradients.
//!
//! All losses share one form. For anchor `i` with weighted positives
//! `(j, w_j)` and logits `l_ik = log f(u_i, t_k)`:
//!
//! ```text
//! L = (1/N) * sum_i sum_j w_j * ( logsumexp_{k in S_ij} l_ik - l_ij )
//! ```
//!
//! `S_ij` is every candidate by default, so the other positive of a mixed
//! anchor sits among the negatives of each term. With
//! [`SimilarityConfig::exclusive_positives`] the other positives are dropped
//! from `S_ij`. Vanilla InfoNCE is the case of one positive with weight 1.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive weights must sum to one within this tolerance.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    /// `exp(<u, t> / tau)`
    ExpDot,
    /// `exp(cos(u, t) / tau)`
    ExpCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    pub temperature: f64,
    /// Drop the other positives from each positive's denominator.
    #[serde(default)]
    pub exclusive_positives: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { kind: SimilarityKind::ExpCosine, temperature: 0.07, exclusive_positives: false }
    }
}

impl SimilarityConfig {
    pub fn new(kind: SimilarityKind, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { kind, temperature, exclusive_positives: false })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `log f(u, t)`.
pub fn logit(u: &[f64], t: &[f64], cfg: &SimilarityConfig) -> Result<f64> {
    if u.len() != t.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: t.len() });
    }
    let raw = match cfg.kind {
        SimilarityKind::ExpDot => dot(u, t),
        SimilarityKind::ExpCosine => {
            let (nu, nt) = (norm(u), norm(t));
            if nu == 0.0 || nt == 0.0 {
                return Err(Error::ZeroNorm);
            }
            dot(u, t) / (nu * nt)
        }
    };
    Ok(raw / cfg.temperature)
}

/// Strictly positive similarity `f(u, t)`.
pub fn similarity(u: &[f64], t: &[f64], cfg: &SimilarityConfig) -> Result<f64> {
    Ok(logit(u, t, cfg)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub index: usize,
    pub weight: f64,
}

impl Positive {
    pub fn new(index: usize, weight: f64) -> Self {
        Self { index, weight }
    }
}

/// Anchors scored against candidates, with up to two weighted positives per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    anchors: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
    positives: Vec<Vec<Positive>>,
}

impl ContrastiveBatch {
    pub fn new(anchors: Vec<Vec<f64>>, candidates: Vec<Vec<f64>>, positives: Vec<Vec<Positive>>) -> Result<Self> {
        if anchors.is_empty() || candidates.is_empty() {
            return Err(Error::BatchTooSmall);
        }
        if positives.len() != anchors.len() {
            return Err(Error::LengthMismatch { expected: anchors.len(), actual: positives.len() });
        }
        let dim = anchors[0].len();
        if let Some(v) = anchors.iter().chain(&candidates).find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
        }
        for (anchor, pos) in positives.iter().enumerate() {
            let invalid = |reason: &str| Error::InvalidPositives { anchor, reason: reason.to_string() };
            if pos.is_empty() || pos.len() > 2 {
                return Err(invalid("expected one or two positives"));
            }
            if pos.iter().any(|p| p.index >= candidates.len()) {
                return Err(invalid("positive index out of range"));
            }
            if pos.len() == 2 && pos[0].index == pos[1].index {
                return Err(invalid("positive indices must be distinct"));
            }
            if pos.iter().any(|p| !(p.weight >= 0.0 && p.weight.is_finite())) {
                return Err(invalid("weights must be finite and non-negative"));
            }
            let sum: f64 = pos.iter().map(|p| p.weight).sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::WeightSumViolation { anchor, sum });
            }
        }
        Ok(Self { anchors, candidates, positives })
    }

    /// Anchor `i` matched to candidate `i`.
    pub fn paired(anchors: Vec<Vec<f64>>, candidates: Vec<Vec<f64>>) -> Result<Self> {
        let positives = (0..anchors.len()).map(|i| vec![Positive::new(i, 1.0)]).collect();
        Self::new(anchors, candidates, positives)
    }

    /// Mixed images against texts. `mixes[i] = (target, source, s_tgt, s_src)`
    /// describes mixed image `i`.
    pub fn mixed_image_to_text(
        mixed: Vec<Vec<f64>>,
        texts: Vec<Vec<f64>>,
        mixes: &[(usize, usize, f64, f64)],
    ) -> Result<Self> {
        let positives = mixes.iter().map(|&(t, s, wt, ws)| vec![Positive::new(t, wt), Positive::new(s, ws)]).collect();
        Self::new(mixed, texts, positives)
    }

    /// Texts against mixed images. Text `j` is positive for every mix it took
    /// part in, weighted by its label on that mix.
    pub fn text_to_mixed_image(
        texts: Vec<Vec<f64>>,
        mixed: Vec<Vec<f64>>,
        mixes: &[(usize, usize, f64, f64)],
    ) -> Result<Self> {
        let mut positives = vec![Vec::new(); texts.len()];
        for (m, &(t, s, wt, ws)) in mixes.iter().enumerate() {
            for (who, w) in [(t, wt), (s, ws)] {
                if who >= texts.len() {
                    return Err(Error::InvalidPositives { anchor: who, reason: "text index out of range".into() });
                }
                positives[who].push(Positive::new(m, w));
            }
        }
        Self::new(texts, mixed, positives)
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    pub fn positives(&self) -> &[Vec<Positive>] {
        &self.positives
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn logits(&self, cfg: &SimilarityConfig) -> Result<Vec<Vec<f64>>> {
        self.anchors.iter().map(|u| self.candidates.iter().map(|t| logit(u, t, cfg)).collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Single positive per anchor.
    Vanilla,
    /// Mixed-image anchors, two weighted text positives.
    I2t,
    /// Text anchors, two weighted mixed-image positives.
    T2i,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub anchors: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
}

/// Per-anchor loss term, kept for debugging dumps.
#[derive(Debug, Clone)]
pub struct AnchorTerm {
    pub anchor: usize,
    pub loss: f64,
    pub positives: Vec<Positive>,
    pub logits: Vec<f64>,
}

fn check_objective(batch: &ContrastiveBatch, which: Objective) -> Result<()> {
    if which == Objective::Vanilla {
        if let Some(anchor) = batch.positives.iter().position(|p| p.len() != 1) {
            return Err(Error::InvalidPositives {
                anchor,
                reason: "vanilla InfoNCE takes exactly one positive".into(),
            });
        }
    }
    Ok(())
}

/// Members of the denominator for positive `j` of one anchor.
fn in_denominator(k: usize, j: usize, pos: &[Positive], cfg: &SimilarityConfig) -> bool {
    !cfg.exclusive_positives || k == j || !pos.iter().any(|p| p.index == k)
}

/// Stable `log sum exp` over the masked row, plus the softmax over the same set.
fn masked_softmax(row: &[f64], mask: impl Fn(usize) -> bool) -> (f64, Vec<f64>) {
    let m = row.iter().enumerate().filter(|&(k, _)| mask(k)).map(|(_, &l)| l).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().enumerate().map(|(k, &l)| if mask(k) { (l - m).exp() } else { 0.0 }).collect();
    let z: f64 = exps.iter().sum();
    (m + z.ln(), exps.into_iter().map(|e| e / z).collect())
}

/// Loss terms and `dL/dlogit` for every anchor.
fn forward(batch: &ContrastiveBatch, cfg: &SimilarityConfig, logits: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    let mut dlogits = Vec::with_capacity(batch.len());
    for (row, pos) in logits.iter().zip(&batch.positives) {
        let mut term = 0.0;
        let mut g = vec![0.0; row.len()];
        let shared = (!cfg.exclusive_positives).then(|| masked_softmax(row, |_| true));
        for p in pos {
            let owned;
            let (lse, probs) = match &shared {
                Some(s) => s,
                None => {
                    owned = masked_softmax(row, |k| in_denominator(k, p.index, pos, cfg));
                    &owned
                }
            };
            term += p.weight * (lse - row[p.index]);
            for (gk, pk) in g.iter_mut().zip(probs) {
                *gk += p.weight * pk / n;
            }
            g[p.index] -= p.weight / n;
        }
        terms.push(term);
        dlogits.push(g);
    }
    (terms, dlogits)
}

fn mean(terms: &[f64]) -> f64 {
    terms.iter().sum::<f64>() / terms.len() as f64
}

fn loss_for(batch: &ContrastiveBatch, cfg: &SimilarityConfig, which: Objective) -> Result<f64> {
    check_objective(batch, which)?;
    let logits = batch.logits(cfg)?;
    Ok(mean(&forward(batch, cfg, &logits).0))
}

/// Mean single-positive InfoNCE. Zero when the batch holds one candidate.
pub fn infonce_loss(batch: &ContrastiveBatch, cfg: &SimilarityConfig) -> Result<f64> {
    loss_for(batch, cfg, Objective::Vanilla)
}

/// Soft-label loss of mixed-image anchors against their two captions.
pub fn timix_i2t_loss(batch: &ContrastiveBatch, cfg: &SimilarityConfig) -> Result<f64> {
    loss_for(batch, cfg, Objective::I2t)
}

/// Soft-label loss of text anchors against the two mixes built from their image.
pub fn timix_t2i_loss(batch: &ContrastiveBatch, cfg: &SimilarityConfig) -> Result<f64> {
    loss_for(batch, cfg, Objective::T2i)
}

/// Loss with exact gradients w.r.t. every anchor and candidate embedding.
pub fn loss_grad(batch: &ContrastiveBatch, cfg: &SimilarityConfig, which: Objective) -> Result<LossGrad> {
    check_objective(batch, which)?;
    let logits = batch.logits(cfg)?;
    let (terms, dlogits) = forward(batch, cfg, &logits);
    let dim = batch.anchors[0].len();
    let mut ga = vec![vec![0.0; dim]; batch.anchors.len()];
    let mut gc = vec![vec![0.0; dim]; batch.candidates.len()];
    let inv_tau = 1.0 / cfg.temperature;

    match cfg.kind {
        SimilarityKind::ExpDot => {
            for (i, u) in batch.anchors.iter().enumerate() {
                for (k, t) in batch.candidates.iter().enumerate() {
                    let g = dlogits[i][k] * inv_tau;
                    if g == 0.0 {
                        continue;
                    }
                    for d in 0..dim {
                        ga[i][d] += g * t[d];
                        gc[k][d] += g * u[d];
                    }
                }
            }
        }
        SimilarityKind::ExpCosine => {
            let unit = |v: &Vec<f64>| {
                let n = norm(v);
                (v.iter().map(|x| x / n).collect::<Vec<f64>>(), n)
            };
            let ua: Vec<_> = batch.anchors.iter().map(unit).collect();
            let uc: Vec<_> = batch.candidates.iter().map(unit).collect();
            for (i, (uh, un)) in ua.iter().enumerate() {
                for (k, (th, tn)) in uc.iter().enumerate() {
                    let g = dlogits[i][k] * inv_tau;
                    if g == 0.0 {
                        continue;
                    }
                    let c = dot(uh, th);
                    for d in 0..dim {
                        ga[i][d] += g * (th[d] - c * uh[d]) / un;
                        gc[k][d] += g * (uh[d] - c * th[d]) / tn;
                    }
                }
            }
        }
    }

    Ok(LossGrad { loss: mean(&terms), anchors: ga, candidates: gc })
}

pub fn anchor_terms(batch: &ContrastiveBatch, cfg: &SimilarityConfig) -> Result<Vec<AnchorTerm>> {
    let logits = batch.logits(cfg)?;
    let (terms, _) = forward(batch, cfg, &logits);
    Ok(terms
        .into_iter()
        .zip(logits)
        .zip(&batch.positives)
        .enumerate()
        .map(|(anchor, ((loss, logits), pos))| AnchorTerm { anchor, loss, positives: pos.clone(), logits })
        .collect())
}

/// CSV dump: `anchor,loss,pos_a,weight_a,pos_b,weight_b,logits` with logits `;`-joined.
pub fn write_debug_csv<W: Write>(terms: &[AnchorTerm], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["anchor", "loss", "pos_a", "weight_a", "pos_b", "weight_b", "logits"])?;
    for t in terms {
        let field = |i: usize, f: fn(&Positive) -> String| t.positives.get(i).map(f).unwrap_or_default();
        let logits = t.logits.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            t.anchor.to_string(),
            t.loss.to_string(),
            field(0, |p| p.index.to_string()),
            field(0, |p| p.weight.to_string()),
            field(1, |p| p.index.to_string()),
            field(1, |p| p.weight.to_string()),
            logits,
        ])?;
    }
    w.flush()?;
    Ok(())
}
