//! Manifests, annotations, mix sidecar records, run configuration, metrics
//! CSV and the binary PPM image codec.
//!
//! Record streams are JSON Lines. Floats are written as shortest round-trip
//! decimals, so every value reads back bit for bit.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::SimilarityConfig;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, PatchGrid};
use crate::mixer::{GammaRange, ImageTensor, MixRecipe, SideRatio, WindowSpec};
use crate::toytrain::{EpochMetrics, Strategy, TrainConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const RECORD_VERSION: u32 = 1;
pub const CONFIG_VERSION: u32 = 1;
/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TIMIX_SEED";

/// A box on an image, optionally tied to the caption phrase it grounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl CaptionBox {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative to the manifest directory unless absolute.
    pub image: PathBuf,
    pub captions: Vec<String>,
    #[serde(default)]
    pub boxes: Vec<CaptionBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VersionHeader {
    version: u32,
}

fn schema(line: usize, message: impl ToString) -> Error {
    Error::SchemaError { line, message: message.to_string() }
}

/// Non-empty lines with their 1-based line numbers.
fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Splits off an optional `{"version": N}` first line.
fn version_header(lines: &mut Vec<(usize, String)>, supported: u32) -> Result<u32> {
    let Some((_, first)) = lines.first() else { return Ok(supported) };
    match serde_json::from_str::<VersionHeader>(first) {
        Ok(h) => {
            if h.version > supported {
                return Err(Error::VersionMismatch { found: h.version, supported });
            }
            lines.remove(0);
            Ok(h.version)
        }
        Err(_) => Ok(supported),
    }
}

/// Loads and validates a manifest: every image must exist, be a readable PPM
/// and have sides divisible by `patch`; boxes must lie inside their image.
/// Entry order follows the file.
pub fn load_manifest(path: &Path, patch: usize) -> Result<DatasetManifest> {
    let mut lines = jsonl_lines(path)?;
    let version = version_header(&mut lines, MANIFEST_VERSION)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::with_capacity(lines.len());
    for (line, text) in lines {
        let entry: ManifestEntry = serde_json::from_str(&text).map_err(|e| schema(line, e))?;
        if entry.image_id.is_empty() {
            return Err(schema(line, "empty image_id"));
        }
        if entry.captions.is_empty() {
            return Err(schema(line, "entry has no captions"));
        }
        let file = root.join(&entry.image);
        if !file.is_file() {
            return Err(Error::MissingFile(file));
        }
        let (width, height) = read_ppm_header(&file)?;
        if PatchGrid::new(height, width, patch).is_err() {
            return Err(Error::BadDimensions { image: entry.image_id.clone(), height, width, patch });
        }
        for b in &entry.boxes {
            box_in_image(b, width, height)?;
        }
        entries.push(entry);
    }
    Ok(DatasetManifest { root, version, entries })
}

fn box_in_image(b: &CaptionBox, width: usize, height: usize) -> Result<()> {
    if b.x0 < b.x1 && b.y0 < b.y1 && b.x1 <= width && b.y1 <= height {
        Ok(())
    } else {
        Err(Error::OutOfBounds { x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1, width, height })
    }
}

/// Grounding annotations for alignment training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<CaptionBox>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut lines = jsonl_lines(path)?;
    version_header(&mut lines, MANIFEST_VERSION)?;
    let mut out = Vec::with_capacity(lines.len());
    for (line, text) in lines {
        let rec: AnnotationRecord = serde_json::from_str(&text).map_err(|e| schema(line, e))?;
        for b in &rec.boxes {
            box_in_image(b, rec.width, rec.height).map_err(|e| schema(line, e))?;
        }
        out.push(rec);
    }
    Ok(out)
}

/// Sidecar record describing how one mixed image was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRecord {
    pub version: u32,
    pub pair_id: String,
    pub grid: PatchGrid,
    pub gamma: f64,
    pub target_window: WindowSpec,
    pub source_window: WindowSpec,
    pub s_src: f64,
    pub s_tgt: f64,
    pub seed: u64,
}

impl MixRecord {
    pub fn from_recipe(pair_id: impl Into<String>, recipe: &MixRecipe, seed: u64) -> Self {
        Self {
            version: RECORD_VERSION,
            pair_id: pair_id.into(),
            grid: recipe.grid,
            gamma: recipe.gamma.value(),
            target_window: recipe.target_window,
            source_window: recipe.source_window,
            s_src: recipe.s_src,
            s_tgt: recipe.s_tgt,
            seed,
        }
    }

    /// Rebuilds the recipe under the given side-ratio range.
    pub fn to_recipe(&self, range: GammaRange) -> Result<MixRecipe> {
        let gamma: SideRatio = range.ratio(self.gamma)?;
        MixRecipe::new(self.grid, gamma, self.target_window, self.source_window)
    }
}

/// Writes one record as a single JSON line.
pub fn write_mixed_record<W: Write>(out: &mut W, record: &MixRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Parses one record. The version is checked before any other field.
pub fn read_mixed_record(line: &str) -> Result<MixRecord> {
    let value: Value = serde_json::from_str(line)?;
    let found = value.get("version").and_then(Value::as_u64).ok_or_else(|| schema(1, "missing version"))?;
    if found > u64::from(RECORD_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            supported: RECORD_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Reads a whole sidecar stream; fails without returning a partial list.
pub fn read_mixed_records<R: Read>(input: R) -> Result<Vec<MixRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(read_mixed_record(&line).map_err(|e| match e {
            Error::Json(j) => schema(i + 1, j),
            other => other,
        })?);
    }
    Ok(out)
}

/// Everything a CLI run needs. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub hidden: usize,
    pub similarity: SimilarityConfig,
    pub gamma: GammaRange,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub tpp_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            version: CONFIG_VERSION,
            height: 256,
            width: 256,
            patch: 16,
            dim: t.embed_dim,
            hidden: t.tpp_hidden,
            similarity: t.similarity,
            gamma: t.gamma,
            batch_size: t.batch_size,
            seed: t.seed,
            strategy: t.strategy,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            lr: t.lr,
            tpp_lr: t.tpp_lr,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.version > CONFIG_VERSION {
            return Err(Error::VersionMismatch { found: cfg.version, supported: CONFIG_VERSION });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Applies `TIMIX_SEED` when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(self)
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.height, self.width, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.height, self.width, self.patch, self.dim, self.hidden, self.batch_size].contains(&0) {
            return Err(Error::InvalidConfig("sizes must be positive".into()));
        }
        self.grid()?;
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            strategy: self.strategy,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            lr: self.lr,
            tpp_lr: self.tpp_lr,
            batch_size: self.batch_size,
            embed_dim: self.dim,
            tpp_hidden: self.hidden,
            similarity: self.similarity,
            gamma: self.gamma,
            seed: self.seed,
        }
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "loss_total",
            "loss_itc",
            "loss_timix_i2t",
            "loss_timix_t2i",
            "loss_pta",
            "eval_loss_itc",
            "acc@1",
            "modality_gap",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<EpochMetrics>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            b => tok.push(b),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::ImageFormat("non-ASCII header".into()))
}

fn ppm_header<R: BufRead>(r: &mut R) -> Result<(usize, usize, usize)> {
    if ppm_token(r)? != "P6" {
        return Err(Error::ImageFormat("expected a binary PPM (P6)".into()));
    }
    let mut num = || -> Result<usize> {
        let t = ppm_token(r)?;
        t.parse().map_err(|_| Error::ImageFormat(format!("bad header field {t:?}")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || !(1..=255).contains(&max) {
        return Err(Error::ImageFormat(format!("unsupported header {w}x{h} maxval {max}")));
    }
    Ok((w, h, max))
}

/// `(width, height)` without reading the pixels.
pub fn read_ppm_header(path: &Path) -> Result<(usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h, _) = ppm_header(&mut r)?;
    Ok((w, h))
}

/// Reads an 8-bit P6 image as RGB values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let (w, h, max) = ppm_header(&mut r)?;
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw).map_err(|_| Error::ImageFormat("truncated pixel data".into()))?;
    let data = raw.iter().map(|&b| f64::from(b) / max as f64).collect();
    ImageTensor::pixels(h, w, 3, data)
}

/// Writes a 3-channel image, quantizing `[0, 1]` to 8 bits.
pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::ImageFormat(format!("PPM needs 3 channels, got {}", image.channels())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
