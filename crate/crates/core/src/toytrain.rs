//! Desk-scale comparison of mixing strategies on a synthetic, partially
//! aligned image-text dataset.
//!
//! Images are patch-feature grids: background patches are noise, and each
//! concept is planted as a rectangle of patches near its prototype vector.
//! Captions name a few concepts, some of which may be missing from the image
//! (the noise rate). A linear dual encoder is trained with plain gradient
//! descent on in-batch contrastive losses, optionally with the patch-alignment
//! objective and a mixing augmentation.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrastive::{self, ContrastiveBatch, Objective, SimilarityConfig};
use crate::error::{Error, Result};
use crate::geometry::{PatchGrid, PatchLabels};
use crate::mixer::{self, GammaRange, GammaSampler, ImageTensor, MixRecipe, WindowSpec};
use crate::rng::{self, Rng};
use crate::tpp::TppModel;

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub feature_dim: usize,
    pub concepts: usize,
    /// Probability that a caption concept has no planted region.
    pub noise_rate: f64,
    pub size: usize,
    pub eval_size: usize,
    pub feature_noise: f64,
    pub max_caption_concepts: usize,
    /// Concepts planted in each image but never named by its caption.
    pub distractors: usize,
    pub plant_min: usize,
    pub plant_max: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            feature_dim: 32,
            concepts: 64,
            noise_rate: 0.4,
            size: 1024,
            eval_size: 256,
            feature_noise: 0.2,
            max_caption_concepts: 3,
            distractors: 1,
            plant_min: 2,
            plant_max: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<PatchGrid> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let grid = PatchGrid::from_shape(self.rows, self.cols).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        if self.concepts < 2 {
            return bad(format!("need at least 2 concepts, got {}", self.concepts));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if self.size < 2 || self.eval_size < 2 {
            return bad("dataset sizes must be at least 2".into());
        }
        if self.feature_dim == 0 || !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature dimension must be positive and noise finite and non-negative".into());
        }
        if self.max_caption_concepts == 0 || self.max_caption_concepts + self.distractors > self.concepts {
            return bad(format!(
                "{} caption concepts plus {} distractors exceed {} concepts",
                self.max_caption_concepts, self.distractors, self.concepts
            ));
        }
        if self.plant_min == 0 || self.plant_min > self.plant_max || self.plant_max > self.rows.min(self.cols) {
            return bad(format!("plant sides {}..={} do not fit the grid", self.plant_min, self.plant_max));
        }
        let most = (self.max_caption_concepts + self.distractors) * self.plant_max * self.plant_max;
        if 4 * most > 3 * self.rows * self.cols {
            return bad("plants would cover more than three quarters of the grid".into());
        }
        Ok(grid)
    }
}

/// A planted concept region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plant {
    pub concept: usize,
    pub window: WindowSpec,
    pub in_caption: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// One feature vector per patch, row-major.
    pub features: Vec<Vec<f64>>,
    pub caption: Vec<usize>,
    pub plants: Vec<Plant>,
    /// Patches inside a plant named by the caption.
    pub labels: PatchLabels,
}

impl Sample {
    /// The first caption-relevant plant.
    pub fn relevant_window(&self) -> Option<WindowSpec> {
        self.plants.iter().find(|p| p.in_caption).map(|p| p.window)
    }

    fn tensor(&self, grid: &PatchGrid) -> ImageTensor {
        let dim = self.features[0].len();
        ImageTensor::features(grid.rows(), grid.cols(), dim, self.features.concat()).expect("consistent sample shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub grid: PatchGrid,
    pub prototypes: Vec<Vec<f64>>,
    pub samples: Vec<Sample>,
}

fn gaussian(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Unit-norm concept prototypes shared by the training and held-out sets.
pub fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(rng::derive_seed(spec.seed, 0));
    (0..spec.concepts)
        .map(|_| {
            let v = gaussian(&mut r, spec.feature_dim, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn place(rng: &mut Rng, grid: &PatchGrid, spec: &SyntheticSpec, taken: &mut [bool]) -> Option<WindowSpec> {
    for _ in 0..1000 {
        let h = rng.random_range(spec.plant_min..=spec.plant_max);
        let w = rng.random_range(spec.plant_min..=spec.plant_max);
        let top = rng.random_range(0..=grid.rows() - h);
        let left = rng.random_range(0..=grid.cols() - w);
        let win = WindowSpec { top, left, h, w };
        let cells: Vec<usize> =
            (top..top + h).flat_map(|r| (left..left + w).map(move |c| r * grid.cols() + c)).collect();
        if cells.iter().all(|&i| !taken[i]) {
            cells.iter().for_each(|&i| taken[i] = true);
            return Some(win);
        }
    }
    None
}

fn generate_split(
    spec: &SyntheticSpec,
    grid: &PatchGrid,
    protos: &[Vec<f64>],
    size: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut r = rng::seeded(seed);
    let concepts: Vec<usize> = (0..spec.concepts).collect();
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let count = r.random_range(1..=spec.max_caption_concepts);
        let chosen: Vec<usize> = concepts.choose_multiple(&mut r, count + spec.distractors).copied().collect();
        let (caption, distractors) = chosen.split_at(count);
        let mut planted: Vec<bool> = caption.iter().map(|_| !r.random_bool(spec.noise_rate)).collect();
        if !planted.iter().any(|&p| p) {
            let i = r.random_range(0..count);
            planted[i] = true;
        }
        let mut features: Vec<Vec<f64>> =
            (0..grid.len()).map(|_| gaussian(&mut r, spec.feature_dim, spec.feature_noise)).collect();
        let mut taken = vec![false; grid.len()];
        let mut labels = vec![false; grid.len()];
        let mut plants = Vec::new();
        let todo = caption.iter().zip(&planted).filter(|(_, &p)| p).map(|(&c, _)| (c, true));
        for (concept, in_caption) in todo.chain(distractors.iter().map(|&c| (c, false))) {
            let window = place(&mut r, grid, spec, &mut taken)
                .ok_or_else(|| Error::InvalidSpec("could not place non-overlapping plants".into()))?;
            for row in window.top..window.top + window.h {
                for col in window.left..window.left + window.w {
                    let i = row * grid.cols() + col;
                    features[i].iter_mut().zip(&protos[concept]).for_each(|(f, p)| *f += p);
                    labels[i] |= in_caption;
                }
            }
            plants.push(Plant { concept, window, in_caption });
        }
        let mut caption = caption.to_vec();
        caption.sort_unstable();
        out.push(Sample { features, caption, plants, labels: PatchLabels::new(labels) });
    }
    Ok(out)
}

/// Training split of `spec`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let grid = spec.validate()?;
    let protos = prototypes(spec);
    let samples = generate_split(spec, &grid, &protos, spec.size, rng::derive_seed(spec.seed, 1))?;
    Ok(Dataset { grid, prototypes: protos, samples })
}

/// Held-out split sharing the training prototypes.
pub fn generate_eval_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let grid = spec.validate()?;
    let protos = prototypes(spec);
    let samples = generate_split(spec, &grid, &protos, spec.eval_size, rng::derive_seed(spec.seed, 2))?;
    Ok(Dataset { grid, prototypes: protos, samples })
}

/// Brute-force search for the rectangle maximizing the summed evidence
/// `<feature, prototype> - 1/2` of one concept. `None` when every patch has
/// negative evidence.
pub fn find_region(grid: &PatchGrid, features: &[Vec<f64>], prototype: &[f64]) -> Option<WindowSpec> {
    let evidence: Vec<f64> =
        features.iter().map(|f| f.iter().zip(prototype).map(|(a, b)| a * b).sum::<f64>() - 0.5).collect();
    let sat = mixer::SummedAreaTable::new(grid.rows(), grid.cols(), &evidence).ok()?;
    let mut best: Option<(f64, WindowSpec)> = None;
    for h in 1..=grid.rows() {
        for w in 1..=grid.cols() {
            for top in 0..=grid.rows() - h {
                for left in 0..=grid.cols() - w {
                    let s = sat.window_sum(top, left, h, w);
                    if s > 0.0 && best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, WindowSpec { top, left, h, w }));
                    }
                }
            }
        }
    }
    best.map(|(_, w)| w)
}

/// Linear image and text encoders into a shared `dim`-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub feature_dim: usize,
    pub concepts: usize,
    pub dim: usize,
    /// `dim x feature_dim`, applied to every patch.
    pub w_img: Vec<f64>,
    /// `dim x concepts`, applied to the normalized caption multi-hot.
    pub w_txt: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `acc += g x^T` for a row-major `g.len() x x.len()` matrix.
fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    for (row, gi) in acc.chunks_mut(x.len()).zip(g) {
        row.iter_mut().zip(x).for_each(|(a, b)| *a += gi * b);
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn multi_hot(caption: &[usize], concepts: usize) -> Vec<f64> {
    let mut m = vec![0.0; concepts];
    let w = 1.0 / caption.len() as f64;
    caption.iter().for_each(|&c| m[c] += w);
    m
}

impl DualEncoder {
    pub fn new(feature_dim: usize, concepts: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut init = |fan_in: usize, n: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| r.random_range(-a..a)).collect::<Vec<f64>>()
        };
        let w_img = init(feature_dim, dim * feature_dim);
        let w_txt = init(concepts, dim * concepts);
        Self { feature_dim, concepts, dim, w_img, w_txt }
    }

    pub fn patch_embeddings(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features.iter().map(|f| matvec(&self.w_img, f)).collect()
    }

    /// Mean-pooled image embedding.
    pub fn image_embedding(&self, features: &[Vec<f64>]) -> Vec<f64> {
        matvec(&self.w_img, &mean_rows(features))
    }

    pub fn text_embedding(&self, caption: &[usize]) -> Vec<f64> {
        matvec(&self.w_txt, &multi_hot(caption, self.concepts))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Contrastive loss only.
    None,
    /// Convex combination of two images, `lambda ~ U(0, 1)`.
    Mixup,
    /// Random window, same position in both images, no alignment objective.
    Cutmix,
    /// Text-aware windows from the patch predictor, trained with the alignment objective.
    Timix,
    /// Alignment objective without mixing.
    NoMix,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::None, Strategy::Mixup, Strategy::Cutmix, Strategy::Timix, Strategy::NoMix];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Mixup => "mixup",
            Strategy::Cutmix => "cutmix",
            Strategy::Timix => "timix",
            Strategy::NoMix => "no-mix",
        }
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, Strategy::Timix | Strategy::NoMix)
    }

    pub fn mixes(self) -> bool {
        matches!(self, Strategy::Mixup | Strategy::Cutmix | Strategy::Timix)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub tpp_lr: f64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub tpp_hidden: usize,
    pub similarity: SimilarityConfig,
    pub gamma: GammaRange,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Timix,
            epochs: 30,
            warmup_epochs: 2,
            lr: 0.5,
            tpp_lr: 0.5,
            batch_size: 32,
            embed_dim: 32,
            tpp_hidden: 32,
            similarity: SimilarityConfig { temperature: 0.1, ..SimilarityConfig::default() },
            gamma: GammaRange::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!("epochs ({}) must be at least warmup epochs ({})", self.epochs, self.warmup_epochs));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.tpp_lr >= 0.0 && self.tpp_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch size must be even and at least 2, got {}", self.batch_size));
        }
        if self.embed_dim == 0 || self.tpp_hidden == 0 {
            return bad("embedding and hidden sizes must be positive".into());
        }
        SimilarityConfig::new(self.similarity.kind, self.similarity.temperature)?;
        GammaRange::new(self.gamma.lo, self.gamma.hi)?;
        Ok(())
    }
}

/// One row of the metrics stream. Training losses are epoch means; the last
/// three columns are measured on the held-out split after the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_itc: f64,
    pub loss_timix_i2t: f64,
    pub loss_timix_t2i: f64,
    pub loss_pta: f64,
    pub eval_loss_itc: f64,
    #[serde(rename = "acc@1")]
    pub acc_at_1: f64,
    pub modality_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Held-out contrastive loss, in-batch retrieval accuracy and modality gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss_itc: f64,
    pub acc_at_1: f64,
    pub modality_gap: f64,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| x / n).collect()
}

/// Distance between the centroids of the normalized image and text embeddings.
pub fn modality_gap(images: &[Vec<f64>], texts: &[Vec<f64>]) -> f64 {
    let u = mean_rows(&images.iter().map(|v| normalized(v)).collect::<Vec<_>>());
    let t = mean_rows(&texts.iter().map(|v| normalized(v)).collect::<Vec<_>>());
    u.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Consecutive chunks of `batch_size`; a trailing chunk under two items is dropped.
fn chunks(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..len).step_by(batch_size).map(|s| s..(s + batch_size).min(len)).filter(|r| r.len() >= 2).collect()
}

pub fn evaluate(encoder: &DualEncoder, data: &Dataset, cfg: &TrainConfig) -> Result<Evaluation> {
    let u: Vec<Vec<f64>> = data.samples.iter().map(|s| encoder.image_embedding(&s.features)).collect();
    let t: Vec<Vec<f64>> = data.samples.iter().map(|s| encoder.text_embedding(&s.caption)).collect();
    let (mut loss, mut hits, mut count) = (0.0, 0usize, 0usize);
    let batches = chunks(u.len(), cfg.batch_size);
    for r in &batches {
        let (ub, tb) = (u[r.clone()].to_vec(), t[r.clone()].to_vec());
        let i2t = contrastive::infonce_loss(&ContrastiveBatch::paired(ub.clone(), tb.clone())?, &cfg.similarity)?;
        let t2i = contrastive::infonce_loss(&ContrastiveBatch::paired(tb.clone(), ub.clone())?, &cfg.similarity)?;
        loss += 0.5 * (i2t + t2i);
        for (i, ui) in ub.iter().enumerate() {
            let logits = tb.iter().map(|tj| contrastive::logit(ui, tj, &cfg.similarity)).collect::<Result<Vec<_>>>()?;
            // Ties resolve against the anchor.
            let best = logits.iter().enumerate().fold(0, |b, (j, &l)| if l > logits[b] { j } else { b });
            hits += usize::from(best == i && logits.iter().enumerate().all(|(j, &l)| j == i || l < logits[i]));
            count += 1;
        }
    }
    Ok(Evaluation {
        loss_itc: loss / batches.len() as f64,
        acc_at_1: hits as f64 / count as f64,
        modality_gap: modality_gap(&u, &t),
    })
}

/// Trained models plus their metrics stream.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub encoder: DualEncoder,
    pub tpp: TppModel,
}

struct Grads {
    w_img: Vec<f64>,
    w_txt: Vec<f64>,
}

impl Grads {
    fn new(enc: &DualEncoder) -> Self {
        Self { w_img: vec![0.0; enc.w_img.len()], w_txt: vec![0.0; enc.w_txt.len()] }
    }
}

/// One mixed image: pooled raw features and its `(target, source, s_tgt, s_src)` labels.
type Mix = (Vec<f64>, (usize, usize, f64, f64));

fn make_mixes(
    strategy: Strategy,
    samples: &[&Sample],
    grid: &PatchGrid,
    maps: Option<&[crate::tpp::ScoreMap]>,
    sampler: &mut GammaSampler,
    rng: &mut Rng,
) -> Result<Vec<Mix>> {
    let n = samples.len() - samples.len() % 2;
    let mut out = Vec::with_capacity(n);
    for (x, y) in mixer::random_pairs(n, rng)? {
        match strategy {
            Strategy::Mixup => {
                let lam: f64 = rng.random_range(0.0..1.0);
                let mx = mean_rows(&samples[x].features);
                let my = mean_rows(&samples[y].features);
                let pooled: Vec<f64> = mx.iter().zip(&my).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
                let back: Vec<f64> = mx.iter().zip(&my).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
                out.push((pooled, (x, y, lam, 1.0 - lam)));
                out.push((back, (y, x, lam, 1.0 - lam)));
            }
            _ => {
                let gamma = sampler.sample();
                let (rxy, ryx) = match maps {
                    Some(m) => {
                        (MixRecipe::text_aware(&m[x], &m[y], gamma)?, MixRecipe::text_aware(&m[y], &m[x], gamma)?)
                    }
                    None => {
                        let r = MixRecipe::random(*grid, gamma, rng);
                        (r, r)
                    }
                };
                for (t, s, recipe) in [(x, y, rxy), (y, x, ryx)] {
                    let img = mixer::composite(&samples[t].tensor(grid), &samples[s].tensor(grid), &recipe)?;
                    out.push((mean_rows(&img.patch_vectors()), (t, s, recipe.s_tgt, recipe.s_src)));
                }
            }
        }
    }
    Ok(out)
}

/// Trains one run. Data, initialization and batching depend only on the
/// dataset spec and `cfg.seed`, so strategies sharing a seed see identical
/// inputs.
pub fn train(spec: &SyntheticSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(spec)?;
    let eval = generate_eval_dataset(spec)?;
    train_on(&data, &eval, cfg)
}

pub fn train_on(data: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let grid = data.grid;
    let feature_dim = data.samples[0].features[0].len();
    let concepts = data.prototypes.len();
    let mut enc = DualEncoder::new(feature_dim, concepts, cfg.embed_dim, rng::derive_seed(cfg.seed, 10));
    let mut tpp = TppModel::new(cfg.embed_dim, cfg.tpp_hidden, rng::derive_seed(cfg.seed, 11));
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(cfg.seed, 12)));
    let batches: Vec<Vec<usize>> = chunks(order.len(), cfg.batch_size).into_iter().map(|r| order[r].to_vec()).collect();
    let mut batch_rng = rng::seeded(rng::derive_seed(cfg.seed, 13));
    let mut mix_rng = rng::seeded(rng::derive_seed(cfg.seed, 14));
    let mut sampler = GammaSampler::new(rng::derive_seed(cfg.seed, 15), cfg.gamma);
    let sim = &cfg.similarity;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mixing = cfg.strategy.mixes() && epoch > cfg.warmup_epochs;
        let mut visit: Vec<usize> = (0..batches.len()).collect();
        visit.shuffle(&mut batch_rng);
        // Per-batch sums, added up in batch order.
        let mut sums = vec![[0.0f64; 5]; batches.len()];
        for &b in &visit {
            let samples: Vec<&Sample> = batches[b].iter().map(|&i| &data.samples[i]).collect();
            let pooled: Vec<Vec<f64>> = samples.iter().map(|s| mean_rows(&s.features)).collect();
            let multi: Vec<Vec<f64>> = samples.iter().map(|s| multi_hot(&s.caption, concepts)).collect();
            let u: Vec<Vec<f64>> = pooled.iter().map(|x| matvec(&enc.w_img, x)).collect();
            let t: Vec<Vec<f64>> = multi.iter().map(|m| matvec(&enc.w_txt, m)).collect();
            let mut g = Grads::new(&enc);
            let mut g_u = vec![vec![0.0; cfg.embed_dim]; u.len()];
            let mut g_t = vec![vec![0.0; cfg.embed_dim]; t.len()];

            let i2t =
                contrastive::loss_grad(&ContrastiveBatch::paired(u.clone(), t.clone())?, sim, Objective::Vanilla)?;
            let t2i =
                contrastive::loss_grad(&ContrastiveBatch::paired(t.clone(), u.clone())?, sim, Objective::Vanilla)?;
            for i in 0..u.len() {
                for k in 0..cfg.embed_dim {
                    g_u[i][k] += 0.5 * (i2t.anchors[i][k] + t2i.candidates[i][k]);
                    g_t[i][k] += 0.5 * (i2t.candidates[i][k] + t2i.anchors[i][k]);
                }
            }
            let loss_itc = 0.5 * (i2t.loss + t2i.loss);

            let mut loss_pta = 0.0;
            let mut maps = None;
            if cfg.strategy.uses_alignment() {
                let m = samples.len() as f64;
                let mut g_tpp = crate::tpp::TppParams::zeros(cfg.embed_dim, cfg.tpp_hidden);
                let mut score_maps = Vec::with_capacity(samples.len());
                for (i, s) in samples.iter().enumerate() {
                    let e = enc.patch_embeddings(&s.features);
                    if mixing {
                        score_maps.push(tpp.forward(&grid, &e, &t[i])?);
                    }
                    let pg = tpp.pta_backward(&e, &t[i], &s.labels)?;
                    loss_pta += pg.loss / m;
                    g_tpp.axpy(1.0 / m, &pg.params);
                    for (gf, x) in pg.features.iter().zip(&s.features) {
                        add_outer(&mut g.w_img, &gf.iter().map(|v| v / m).collect::<Vec<_>>(), x);
                    }
                    g_t[i].iter_mut().zip(&pg.text).for_each(|(a, b)| *a += b / m);
                }
                if mixing {
                    maps = Some(score_maps);
                }
                tpp.params_mut().axpy(-cfg.tpp_lr, &g_tpp);
            }

            let (mut loss_ti2t, mut loss_tt2i) = (0.0, 0.0);
            if mixing {
                let mixes = make_mixes(cfg.strategy, &samples, &grid, maps.as_deref(), &mut sampler, &mut mix_rng)?;
                let labels: Vec<_> = mixes.iter().map(|m| m.1).collect();
                let um: Vec<Vec<f64>> = mixes.iter().map(|m| matvec(&enc.w_img, &m.0)).collect();
                let a = contrastive::loss_grad(
                    &ContrastiveBatch::mixed_image_to_text(um.clone(), t.clone(), &labels)?,
                    sim,
                    Objective::I2t,
                )?;
                let c = contrastive::loss_grad(
                    &ContrastiveBatch::text_to_mixed_image(t.clone(), um, &labels)?,
                    sim,
                    Objective::T2i,
                )?;
                loss_ti2t = a.loss;
                loss_tt2i = c.loss;
                for (j, mix) in mixes.iter().enumerate() {
                    let gm: Vec<f64> = a.anchors[j].iter().zip(&c.candidates[j]).map(|(p, q)| 0.5 * (p + q)).collect();
                    add_outer(&mut g.w_img, &gm, &mix.0);
                }
                for i in 0..t.len() {
                    for k in 0..cfg.embed_dim {
                        g_t[i][k] += 0.5 * (a.candidates[i][k] + c.anchors[i][k]);
                    }
                }
            }

            for i in 0..u.len() {
                add_outer(&mut g.w_img, &g_u[i], &pooled[i]);
                add_outer(&mut g.w_txt, &g_t[i], &multi[i]);
            }
            enc.w_img.iter_mut().zip(&g.w_img).for_each(|(w, d)| *w -= cfg.lr * d);
            enc.w_txt.iter_mut().zip(&g.w_txt).for_each(|(w, d)| *w -= cfg.lr * d);

            let total = loss_itc + loss_pta + 0.5 * (loss_ti2t + loss_tt2i);
            sums[b] = [total, loss_itc, loss_ti2t, loss_tt2i, loss_pta];
        }
        let nb = batches.len() as f64;
        let mean = |k: usize| sums.iter().map(|s| s[k]).sum::<f64>() / nb;
        let ev = evaluate(&enc, eval, cfg)?;
        epochs.push(EpochMetrics {
            epoch,
            loss_total: mean(0),
            loss_itc: mean(1),
            loss_timix_i2t: mean(2),
            loss_timix_t2i: mean(3),
            loss_pta: mean(4),
            eval_loss_itc: ev.loss_itc,
            acc_at_1: ev.acc_at_1,
            modality_gap: ev.modality_gap,
        });
    }
    Ok(TrainOutcome { metrics: RunMetrics { strategy: cfg.strategy, seed: cfg.seed, epochs }, encoder: enc, tpp })
}

/// The four ablation variants and the strategy each one trains.
pub const ABLATION_VARIANTS: [(&str, Strategy); 4] =
    [("full", Strategy::Timix), ("no-pta", Strategy::Cutmix), ("no-mix", Strategy::NoMix), ("none", Strategy::None)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub eval_loss_itc: f64,
    #[serde(rename = "acc@1")]
    pub acc_at_1: f64,
    pub modality_gap: f64,
}

/// Runs every variant for every seed. The dataset seed follows each run seed.
pub fn ablate(spec: &SyntheticSpec, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let spec = SyntheticSpec { seed, ..spec.clone() };
        let data = generate_dataset(&spec)?;
        let eval = generate_eval_dataset(&spec)?;
        for (name, strategy) in ABLATION_VARIANTS {
            let cfg = TrainConfig { strategy, seed, ..base.clone() };
            let out = train_on(&data, &eval, &cfg)?;
            let last = out.metrics.last().ok_or(Error::InvalidConfig("no epochs to report".into()))?;
            rows.push(AblationRow {
                variant: name.to_string(),
                seed,
                eval_loss_itc: last.eval_loss_itc,
                acc_at_1: last.acc_at_1,
                modality_gap: last.modality_gap,
            });
        }
    }
    Ok(rows)
}

/// Median of `values` (mean of the middle two for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-variant medians over seeds, in variant order.
pub fn ablation_medians(rows: &[AblationRow]) -> Vec<(String, f64, f64, f64)> {
    ABLATION_VARIANTS
        .iter()
        .map(|(name, _)| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == *name).collect();
            let pick = |f: fn(&AblationRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            (name.to_string(), pick(|r| r.eval_loss_itc), pick(|r| r.acc_at_1), pick(|r| r.modality_gap))
        })
        .collect()
}

fn iou(a: &WindowSpec, b: &WindowSpec) -> f64 {
    let ih = (a.top + a.h).min(b.top + b.h).saturating_sub(a.top.max(b.top));
    let iw = (a.left + a.w).min(b.left + b.w).saturating_sub(a.left.max(b.left));
    let inter = (ih * iw) as f64;
    inter / ((a.h * a.w + b.h * b.w) as f64 - inter)
}

/// Mean IoU between the highest-scoring window and the relevant plant, next
/// to the mean IoU of a uniformly placed window of the same size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub model_iou: f64,
    pub random_iou: f64,
}

pub fn region_recovery(encoder: &DualEncoder, tpp: &TppModel, data: &Dataset) -> Result<RecoveryReport> {
    let grid = data.grid;
    let (mut model, mut random, mut n) = (0.0, 0.0, 0usize);
    for s in &data.samples {
        let Some(plant) = s.relevant_window() else { continue };
        let e = encoder.patch_embeddings(&s.features);
        let text = encoder.text_embedding(&s.caption);
        let map = tpp.forward(&grid, &e, &text)?;
        let best = mixer::window_sums(&map, plant.h, plant.w)?.argmax();
        model += iou(&best, &plant);
        let (mut sum, mut count) = (0.0, 0usize);
        for top in 0..=grid.rows() - plant.h {
            for left in 0..=grid.cols() - plant.w {
                sum += iou(&WindowSpec { top, left, h: plant.h, w: plant.w }, &plant);
                count += 1;
            }
        }
        random += sum / count as f64;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(RecoveryReport { model_iou: model / n, random_iou: random / n })
}
