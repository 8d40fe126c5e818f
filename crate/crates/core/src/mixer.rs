//! Text-aware region selection, compositing and soft labels.
//!
//! For a target/source pair the mixer picks the `h x w` window of the target
//! with the lowest total text relevance and the equally sized window of the
//! source with the highest, then pastes the source window over the target
//! window. The mixed image is matched to the source caption with weight
//! `s_src = h*w*P^2 / (H*W)` and to the target caption with `1 - s_src`.
//!
//! Windows are stored by top-left corner. The center convention
//! `(top + h/2, left + w/2)` is available through [`WindowSpec::center`].

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::rng::Rng;
use crate::tpp::ScoreMap;

/// Relative tolerance under which two window totals count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for GammaRange {
    fn default() -> Self {
        Self { lo: 0.25, hi: 0.75 }
    }
}

impl GammaRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidConfig(format!("gamma bounds [{lo}, {hi}] must satisfy 0 <= lo < hi < 1")));
        }
        Ok(Self { lo, hi })
    }

    pub fn ratio(&self, gamma: f64) -> Result<SideRatio> {
        if gamma >= self.lo && gamma <= self.hi {
            Ok(SideRatio(gamma))
        } else {
            Err(Error::InvalidSideRatio(gamma))
        }
    }
}

/// Side ratio of the mixed window relative to the grid.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SideRatio(f64);

impl SideRatio {
    /// A ratio in the default range `[0.25, 0.75]`.
    pub fn new(gamma: f64) -> Result<Self> {
        GammaRange::default().ratio(gamma)
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Window extent `(h, w) = (floor(gamma*rows), floor(gamma*cols))`, at least 1.
    pub fn extent(&self, grid: &PatchGrid) -> (usize, usize) {
        let h = (self.0 * grid.rows() as f64).floor() as usize;
        let w = (self.0 * grid.cols() as f64).floor() as usize;
        (h.clamp(1, grid.rows()), w.clamp(1, grid.cols()))
    }
}

/// Seeded uniform sampler of side ratios.
#[derive(Debug, Clone)]
pub struct GammaSampler {
    rng: Rng,
    range: GammaRange,
}

impl GammaSampler {
    pub fn new(seed: u64, range: GammaRange) -> Self {
        Self { rng: crate::rng::seeded(seed), range }
    }

    pub fn sample(&mut self) -> SideRatio {
        SideRatio(self.rng.random_range(self.range.lo..=self.range.hi))
    }
}

/// An `h x w` window of patches, addressed by its top-left patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    #[serde(rename = "r")]
    pub top: usize,
    #[serde(rename = "c")]
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn center(&self) -> (usize, usize) {
        (self.top + self.h / 2, self.left + self.w / 2)
    }

    pub fn from_center(a: usize, b: usize, h: usize, w: usize) -> Option<Self> {
        Some(Self { top: a.checked_sub(h / 2)?, left: b.checked_sub(w / 2)?, h, w })
    }

    pub fn fits(&self, grid: &PatchGrid) -> bool {
        self.h >= 1 && self.w >= 1 && self.top + self.h <= grid.rows() && self.left + self.w <= grid.cols()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.h && col >= self.left && col < self.left + self.w
    }
}

/// Prefix sums with a zero first row and column.
#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    rows: usize,
    cols: usize,
    table: Vec<f64>,
}

impl SummedAreaTable {
    pub fn new(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, actual: values.len() });
        }
        let stride = cols + 1;
        let mut table = vec![0.0; (rows + 1) * stride];
        for r in 0..rows {
            let mut row_sum = 0.0;
            for c in 0..cols {
                row_sum += values[r * cols + c];
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
            }
        }
        Ok(Self { rows, cols, table })
    }

    /// Sum over the `h x w` window whose top-left is `(r, c)`.
    pub fn window_sum(&self, r: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.cols + 1;
        let t = &self.table;
        t[(r + h) * s + c + w] - t[r * s + c + w] - t[(r + h) * s + c] + t[r * s + c]
    }

    pub fn window_sums(&self, h: usize, w: usize) -> Result<WindowSums> {
        if h == 0 || w == 0 || h > self.rows || w > self.cols {
            return Err(Error::WindowTooLarge { h, w, rows: self.rows, cols: self.cols });
        }
        let (out_rows, out_cols) = (self.rows - h + 1, self.cols - w + 1);
        let mut values = Vec::with_capacity(out_rows * out_cols);
        for r in 0..out_rows {
            for c in 0..out_cols {
                values.push(self.window_sum(r, c, h, w));
            }
        }
        Ok(WindowSums { rows: out_rows, cols: out_cols, h, w, values })
    }
}

/// Totals of every `h x w` window, indexed by top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSums {
    pub rows: usize,
    pub cols: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl WindowSums {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    fn pick(&self, extremum: f64) -> WindowSpec {
        let tol = TIE_TOLERANCE * extremum.abs().max(1.0);
        let i = self.values.iter().position(|v| (v - extremum).abs() <= tol).expect("window sums are never empty");
        WindowSpec { top: i / self.cols, left: i % self.cols, h: self.h, w: self.w }
    }

    /// Lowest-total window; ties go to the smallest row-major top-left.
    pub fn argmin(&self) -> WindowSpec {
        self.pick(self.values.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// Highest-total window; ties go to the smallest row-major top-left.
    pub fn argmax(&self) -> WindowSpec {
        self.pick(self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

pub fn window_sums(map: &ScoreMap, h: usize, w: usize) -> Result<WindowSums> {
    let g = map.grid();
    SummedAreaTable::new(g.rows(), g.cols(), map.scores())?.window_sums(h, w)
}

/// Returns `(target window, source window)`: the least relevant window of the
/// target map and the most relevant window of the source map.
pub fn select_windows(target: &ScoreMap, source: &ScoreMap, gamma: SideRatio) -> Result<(WindowSpec, WindowSpec)> {
    let (tg, sg) = (target.grid(), source.grid());
    if (tg.rows(), tg.cols()) != (sg.rows(), sg.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "score maps {}x{} and {}x{}",
            tg.rows(),
            tg.cols(),
            sg.rows(),
            sg.cols()
        )));
    }
    let (h, w) = gamma.extent(tg);
    Ok((window_sums(target, h, w)?.argmin(), window_sums(source, h, w)?.argmax()))
}

/// Returns `(s_tgt, s_src)`.
pub fn soft_labels(grid: &PatchGrid, gamma: SideRatio) -> (f64, f64) {
    let (h, w) = gamma.extent(grid);
    let p = grid.patch_size();
    let s_src = (h * w * p * p) as f64 / (grid.height() * grid.width()) as f64;
    (1.0 - s_src, s_src)
}

/// Everything needed to reproduce one mixed image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    pub grid: PatchGrid,
    pub gamma: SideRatio,
    pub target_window: WindowSpec,
    pub source_window: WindowSpec,
    /// Weight of the source caption.
    pub s_src: f64,
    /// Weight of the target caption.
    pub s_tgt: f64,
}

impl MixRecipe {
    pub fn new(
        grid: PatchGrid,
        gamma: SideRatio,
        target_window: WindowSpec,
        source_window: WindowSpec,
    ) -> Result<Self> {
        let (h, w) = gamma.extent(&grid);
        for win in [&target_window, &source_window] {
            if (win.h, win.w) != (h, w) || !win.fits(&grid) {
                return Err(Error::ShapeMismatch(format!(
                    "window {win:?} does not match extent {h}x{w} on {}x{} grid",
                    grid.rows(),
                    grid.cols()
                )));
            }
        }
        let (s_tgt, s_src) = soft_labels(&grid, gamma);
        Ok(Self { grid, gamma, target_window, source_window, s_src, s_tgt })
    }

    /// Text-aware recipe from the two score maps.
    pub fn text_aware(target: &ScoreMap, source: &ScoreMap, gamma: SideRatio) -> Result<Self> {
        let (tw, sw) = select_windows(target, source, gamma)?;
        Self::new(*target.grid(), gamma, tw, sw)
    }

    /// CutMix-style recipe: one uniformly random position used in both images.
    pub fn random(grid: PatchGrid, gamma: SideRatio, rng: &mut Rng) -> Self {
        let (h, w) = gamma.extent(&grid);
        let top = rng.random_range(0..=grid.rows() - h);
        let left = rng.random_range(0..=grid.cols() - w);
        let win = WindowSpec { top, left, h, w };
        Self::new(grid, gamma, win, win).expect("random window fits by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `H x W x C` pixels; one patch spans `P x P` pixels.
    Pixels,
    /// `rows x cols x D` patch features; one patch is one cell.
    PatchFeatures,
}

/// Dense `height x width x channels` array, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    layout: Layout,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(layout: Layout, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::LengthMismatch { expected: height * width * channels, actual: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::ShapeMismatch("tensor holds non-finite values".into()));
        }
        Ok(Self { layout, height, width, channels, data })
    }

    pub fn pixels(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Layout::Pixels, height, width, channels, data)
    }

    pub fn features(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Layout::PatchFeatures, rows, cols, dim, data)
    }

    pub fn filled(layout: Layout, height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { layout, height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Cells per patch side for `grid`, after checking the shape agrees with it.
    fn footprint(&self, grid: &PatchGrid) -> Result<usize> {
        let (expect_h, expect_w, scale) = match self.layout {
            Layout::Pixels => (grid.height(), grid.width(), grid.patch_size()),
            Layout::PatchFeatures => (grid.rows(), grid.cols(), 1),
        };
        if (self.height, self.width) != (expect_h, expect_w) {
            return Err(Error::ShapeMismatch(format!(
                "{:?} tensor is {}x{}, grid expects {}x{}",
                self.layout, self.height, self.width, expect_h, expect_w
            )));
        }
        Ok(scale)
    }

    /// Patch features as one vector per patch, row-major.
    pub fn patch_vectors(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.channels).map(<[f64]>::to_vec).collect()
    }
}

/// The target with its target-window footprint overwritten by the source-window footprint.
pub fn composite(target: &ImageTensor, source: &ImageTensor, recipe: &MixRecipe) -> Result<ImageTensor> {
    if target.layout != source.layout
        || (target.height, target.width, target.channels) != (source.height, source.width, source.channels)
    {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{}x{} vs source {}x{}x{}",
            target.height, target.width, target.channels, source.height, source.width, source.channels
        )));
    }
    let s = target.footprint(&recipe.grid)?;
    let (tw, sw) = (recipe.target_window, recipe.source_window);
    let span = tw.w * s * target.channels;
    let mut out = target.clone();
    for dy in 0..tw.h * s {
        let to = ((tw.top * s + dy) * target.width + tw.left * s) * target.channels;
        let so = ((sw.top * s + dy) * source.width + sw.left * s) * source.channels;
        out.data[to..to + span].copy_from_slice(&source.data[so..so + span]);
    }
    Ok(out)
}

/// Both mixes of a pair under one shared side ratio.
#[derive(Debug, Clone)]
pub struct MixedPair {
    /// `x` as target, `y` as source.
    pub xy: ImageTensor,
    /// `y` as target, `x` as source.
    pub yx: ImageTensor,
    pub recipe_xy: MixRecipe,
    pub recipe_yx: MixRecipe,
}

impl MixedPair {
    /// Weight of caption `x` on each mix: `(on xy, on yx)`. Sums to one.
    pub fn labels_for_x(&self) -> (f64, f64) {
        (self.recipe_xy.s_tgt, self.recipe_yx.s_src)
    }

    pub fn labels_for_y(&self) -> (f64, f64) {
        (self.recipe_xy.s_src, self.recipe_yx.s_tgt)
    }
}

pub fn mix_pair(x: (&ImageTensor, &ScoreMap), y: (&ImageTensor, &ScoreMap), gamma: SideRatio) -> Result<MixedPair> {
    let recipe_xy = MixRecipe::text_aware(x.1, y.1, gamma)?;
    let recipe_yx = MixRecipe::text_aware(y.1, x.1, gamma)?;
    Ok(MixedPair { xy: composite(x.0, y.0, &recipe_xy)?, yx: composite(y.0, x.0, &recipe_yx)?, recipe_xy, recipe_yx })
}

/// Random disjoint pairing of `n` items. `n` must be even.
pub fn random_pairs(n: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("cannot pair an odd number of items ({n})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(2).map(|p| (p[0], p[1])).collect())
}

/// One mixed item of a batch: the image, its recipe and the `(target, source)` indices.
#[derive(Debug, Clone)]
pub struct BatchMix {
    pub image: ImageTensor,
    pub recipe: MixRecipe,
    pub target: usize,
    pub source: usize,
}

/// Pairs a batch at random and mixes every pair both ways, one side ratio per pair.
pub fn mix_batch(
    images: &[ImageTensor],
    maps: &[ScoreMap],
    sampler: &mut GammaSampler,
    rng: &mut Rng,
) -> Result<Vec<BatchMix>> {
    if images.len() != maps.len() {
        return Err(Error::LengthMismatch { expected: images.len(), actual: maps.len() });
    }
    let mut out = Vec::with_capacity(images.len());
    for (x, y) in random_pairs(images.len(), rng)? {
        let pair = mix_pair((&images[x], &maps[x]), (&images[y], &maps[y]), sampler.sample())?;
        out.push(BatchMix { image: pair.xy, recipe: pair.recipe_xy, target: x, source: y });
        out.push(BatchMix { image: pair.yx, recipe: pair.recipe_yx, target: y, source: x });
    }
    Ok(out)
}
