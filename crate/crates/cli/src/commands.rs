//! Subcommand implementations. Each one validates and computes everything in
//! memory before the first output file is created.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use timix::dataio::{self, DatasetManifest, MixRecord, RunConfig};
use timix::error::{Error, Result};
use timix::featurize::{embed_text, PatchFeaturizer};
use timix::geometry::{box_to_patch_labels, PatchGrid};
use timix::mi;
use timix::mixer::{self, GammaSampler, ImageTensor, MixedPair};
use timix::rng::{derive_seed, seeded};
use timix::toytrain::{self, EpochMetrics, Strategy, SyntheticSpec};
use timix::tpp::{PtaExample, ScoreMap, TppModel};

use crate::chart::{line_chart, Series};
use crate::output::Outputs;

/// Projection seed shared by every command, so features seen by `mix` match
/// the ones a checkpoint was trained on.
pub const FEATURIZER_SEED: u64 = 0x5EED_F00D;
const IMAGE_CHANNELS: usize = 3;

const SEED_PAIRING: u64 = 0;
const SEED_GAMMA: u64 = 1;
const SEED_TPP_INIT: u64 = 2;
const SEED_TPP_ORDER: u64 = 3;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Loads the config, applies flag overrides, then `TIMIX_SEED`, then `--seed`.
pub fn resolve(config: Option<&Path>, seed: Option<u64>, overrides: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides(&mut cfg);
    let mut cfg = cfg.with_env_seed()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    eprintln!("master seed: {}", cfg.seed);
    Ok(cfg)
}

fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    match path {
        None => Ok(SyntheticSpec::default()),
        Some(p) if !p.is_file() => Err(Error::MissingFile(p.to_path_buf())),
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// JSONL manifest of images and their captions.
    #[arg(long, visible_alias = "captions")]
    pub manifest: PathBuf,
    /// Patch-scorer checkpoint from `train-tpp`. An untrained scorer is used when absent.
    #[arg(long)]
    pub tpp: Option<PathBuf>,
    /// Seed of the side-ratio stream. Derived from the master seed when absent.
    #[arg(long)]
    pub gamma_seed: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// Output directory for mixed PPM images and `mixed.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    id: String,
    image: ImageTensor,
    map: ScoreMap,
}

fn check_id(id: &str) -> Result<()> {
    if id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(invalid(format!("image_id {id:?} cannot be used as a file name")));
    }
    Ok(())
}

fn scorer(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<TppModel> {
    match ckpt {
        Some(p) => TppModel::load(p),
        None => Ok(TppModel::new(cfg.dim, cfg.hidden, derive_seed(cfg.seed, SEED_TPP_INIT))),
    }
}

fn manifest_grid(manifest: &DatasetManifest, patch: usize) -> Result<PatchGrid> {
    let mut grid: Option<PatchGrid> = None;
    for e in &manifest.entries {
        let (w, h) = dataio::read_ppm_header(&manifest.image_path(e))?;
        let g = PatchGrid::new(h, w, patch).map_err(|_| Error::BadDimensions {
            image: e.image_id.clone(),
            height: h,
            width: w,
            patch,
        })?;
        match grid {
            None => grid = Some(g),
            Some(first) if first != g => {
                return Err(Error::ShapeMismatch(format!(
                    "image {} is {h}x{w}, expected {}x{} like the first image",
                    e.image_id,
                    first.height(),
                    first.width()
                )))
            }
            Some(_) => {}
        }
    }
    grid.ok_or_else(|| invalid("manifest has no entries"))
}

pub fn mix(args: &MixArgs, config: Option<&Path>) -> Result<String> {
    let cfg = resolve(config, args.seed, |c| {
        if let Some(p) = args.patch {
            c.patch = p;
        }
    })?;
    let manifest = dataio::load_manifest(&args.manifest, cfg.patch)?;
    let grid = manifest_grid(&manifest, cfg.patch)?;
    for e in &manifest.entries {
        check_id(&e.image_id)?;
    }
    let tpp = scorer(&cfg, args.tpp.as_deref())?;
    let featurizer = PatchFeaturizer::new(tpp.dim(), IMAGE_CHANNELS, FEATURIZER_SEED);
    let mut rng = seeded(derive_seed(cfg.seed, SEED_PAIRING));
    let pairs = mixer::random_pairs(manifest.entries.len(), &mut rng)?;
    let gamma_seed = args.gamma_seed.unwrap_or_else(|| derive_seed(cfg.seed, SEED_GAMMA));
    let mut sampler = GammaSampler::new(gamma_seed, cfg.gamma);
    let gammas: Vec<_> = pairs.iter().map(|_| sampler.sample()).collect();

    let loaded: Vec<Loaded> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let image = dataio::read_ppm(&manifest.image_path(e))?;
            let features = featurizer.featurize(&image, &grid)?;
            let map = tpp.forward(&grid, &features, &embed_text(&e.captions[0], tpp.dim()))?;
            Ok(Loaded { id: e.image_id.clone(), image, map })
        })
        .collect::<Result<_>>()?;
    let mixed: Vec<MixedPair> = pairs
        .par_iter()
        .zip(&gammas)
        .map(|(&(x, y), &g)| mixer::mix_pair((&loaded[x].image, &loaded[x].map), (&loaded[y].image, &loaded[y].map), g))
        .collect::<Result<_>>()?;

    let mut items = Vec::with_capacity(2 * pairs.len());
    for (&(x, y), m) in pairs.iter().zip(&mixed) {
        let (a, b) = (&loaded[x].id, &loaded[y].id);
        items.push((format!("{a}+{b}"), &m.xy, &m.recipe_xy));
        items.push((format!("{b}+{a}"), &m.yx, &m.recipe_yx));
    }

    let mut out = Outputs::new();
    out.dir(&args.out)?;
    for (id, image, _) in &items {
        out.file(&args.out.join(format!("{id}.ppm")), |p| dataio::write_ppm(p, image))?;
    }
    out.file(&args.out.join("mixed.jsonl"), |p| {
        let mut w = BufWriter::new(File::create(p)?);
        for (id, _, recipe) in &items {
            dataio::write_mixed_record(&mut w, &MixRecord::from_recipe(id.clone(), recipe, gamma_seed))?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.commit();
    Ok(format!(
        "mixed {} images into {} outputs in {} (grid {}x{}, gamma seed {gamma_seed})\n",
        loaded.len(),
        items.len(),
        args.out.display(),
        grid.rows(),
        grid.cols()
    ))
}

#[derive(Debug, Args)]
pub struct TrainTppArgs {
    /// JSONL manifest; boxes on its entries become alignment targets.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Extra grounding annotations keyed by image_id.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-epoch loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn alignment_examples(
    manifest: &DatasetManifest,
    annotations: Option<&Path>,
    patch: usize,
    dim: usize,
) -> Result<Vec<PtaExample>> {
    let grid = manifest_grid(manifest, patch)?;
    let mut boxes: HashMap<&str, Vec<timix::dataio::CaptionBox>> =
        manifest.entries.iter().map(|e| (e.image_id.as_str(), e.boxes.clone())).collect();
    let records = match annotations {
        Some(p) => dataio::read_annotations(p)?,
        None => Vec::new(),
    };
    for rec in &records {
        let slot = boxes
            .get_mut(rec.image_id.as_str())
            .ok_or_else(|| invalid(format!("annotation for unknown image {:?}", rec.image_id)))?;
        if (rec.width, rec.height) != (grid.width(), grid.height()) {
            return Err(Error::ShapeMismatch(format!(
                "annotation for {} is {}x{}, image is {}x{}",
                rec.image_id,
                rec.width,
                rec.height,
                grid.width(),
                grid.height()
            )));
        }
        slot.extend(rec.boxes.iter().cloned());
    }
    let featurizer = PatchFeaturizer::new(dim, IMAGE_CHANNELS, FEATURIZER_SEED);
    let per_entry: Vec<Vec<PtaExample>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let list = &boxes[e.image_id.as_str()];
            if list.is_empty() {
                return Ok(Vec::new());
            }
            let image = dataio::read_ppm(&manifest.image_path(e))?;
            let features = featurizer.featurize(&image, &grid)?;
            list.iter()
                .map(|b| {
                    let caption = b.caption.as_deref().unwrap_or(&e.captions[0]);
                    Ok(PtaExample {
                        features: features.clone(),
                        text: embed_text(caption, dim),
                        labels: box_to_patch_labels(&grid, &b.bbox())?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let examples: Vec<PtaExample> = per_entry.into_iter().flatten().collect();
    if examples.is_empty() {
        return Err(invalid("no boxes to train on"));
    }
    Ok(examples)
}

pub fn train_tpp(args: &TrainTppArgs, config: Option<&Path>) -> Result<String> {
    let cfg = resolve(config, args.seed, |c| {
        if let Some(p) = args.patch {
            c.patch = p;
        }
        if let Some(e) = args.epochs {
            c.epochs = e;
            c.warmup_epochs = c.warmup_epochs.min(e);
        }
        if let Some(lr) = args.lr {
            c.tpp_lr = lr;
        }
    })?;
    let manifest = dataio::load_manifest(&args.manifest, cfg.patch)?;
    let examples = alignment_examples(&manifest, args.annotations.as_deref(), cfg.patch, cfg.dim)?;
    let mut model = TppModel::new(cfg.dim, cfg.hidden, derive_seed(cfg.seed, SEED_TPP_INIT));
    let mut rng = seeded(derive_seed(cfg.seed, SEED_TPP_ORDER));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PtaExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            total += model.pta_train_step(&batch, cfg.tpp_lr)? * chunk.len() as f64;
        }
        losses.push(total / examples.len() as f64);
    }
    let final_loss = model.batch_loss(&examples)?;

    let mut out = Outputs::new();
    out.file(&args.out, |p| model.save(p))?;
    if let Some(log) = &args.log {
        let mut csv = String::from("epoch,loss_pta\n");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", i + 1, fmt_f64(*l));
        }
        out.file(log, |p| write_text(p, &csv))?;
    }
    out.commit();
    Ok(format!(
        "trained patch scorer on {} boxes for {} epochs; final alignment loss {final_loss:.6}; checkpoint {}\n",
        examples.len(),
        cfg.epochs,
        args.out.display()
    ))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Synthetic dataset spec (JSON). Defaults apply when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tpp_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Optional checkpoint of the trained patch scorer.
    #[arg(long)]
    pub tpp_out: Option<PathBuf>,
}

pub fn train(args: &TrainArgs, config: Option<&Path>) -> Result<String> {
    let cfg = resolve(config, args.seed, |c| {
        if let Some(s) = args.strategy {
            c.strategy = s;
        }
        if let Some(e) = args.epochs {
            c.epochs = e;
        }
        if let Some(w) = args.warmup {
            c.warmup_epochs = w;
        }
        if let Some(lr) = args.lr {
            c.lr = lr;
        }
        if let Some(lr) = args.tpp_lr {
            c.tpp_lr = lr;
        }
        if let Some(b) = args.batch_size {
            c.batch_size = b;
        }
    })?;
    let spec = SyntheticSpec { seed: cfg.seed, ..load_spec(args.spec.as_deref())? };
    spec.validate()?;
    let outcome = toytrain::train(&spec, &cfg.train_config())?;
    let mut csv = Vec::new();
    dataio::write_metrics_csv(&outcome.metrics.epochs, &mut csv)?;

    let mut out = Outputs::new();
    out.file(&args.metrics, |p| Ok(fs::write(p, &csv)?))?;
    if let Some(t) = &args.tpp_out {
        out.file(t, |p| outcome.tpp.save(p))?;
    }
    out.commit();
    let mut msg = format!("strategy {} seed {}: {} epochs\n", cfg.strategy, cfg.seed, outcome.metrics.epochs.len());
    if let Some(m) = outcome.metrics.last() {
        let _ = writeln!(
            msg,
            "final loss_total {:.4} eval_loss_itc {:.4} acc@1 {:.4} modality_gap {:.4}",
            m.loss_total, m.eval_loss_itc, m.acc_at_1, m.modality_gap
        );
    }
    Ok(msg)
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated run seeds. Defaults to three seeds starting at the master seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comparison table CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub const ABLATION_HEADER: &str = "variant,seed,eval_loss_itc,acc@1,modality_gap";

pub fn ablate(args: &AblateArgs, config: Option<&Path>) -> Result<String> {
    let cfg = resolve(config, args.seed, |c| {
        if let Some(e) = args.epochs {
            c.epochs = e;
        }
        if let Some(w) = args.warmup {
            c.warmup_epochs = w;
        }
    })?;
    let seeds =
        if args.seeds.is_empty() { (0..3).map(|i| cfg.seed.wrapping_add(i)).collect() } else { args.seeds.clone() };
    let spec = load_spec(args.spec.as_deref())?;
    for &s in &seeds {
        SyntheticSpec { seed: s, ..spec.clone() }.validate()?;
    }
    let base = cfg.train_config();
    let per_seed: Vec<Vec<toytrain::AblationRow>> =
        seeds.par_iter().map(|&s| toytrain::ablate(&spec, &base, &[s])).collect::<Result<_>>()?;
    let rows: Vec<toytrain::AblationRow> = per_seed.into_iter().flatten().collect();
    let medians = toytrain::ablation_medians(&rows);

    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.variant,
            r.seed,
            fmt_f64(r.eval_loss_itc),
            fmt_f64(r.acc_at_1),
            fmt_f64(r.modality_gap)
        );
    }
    for (name, loss, acc, gap) in &medians {
        let _ = writeln!(csv, "{name},median,{},{},{}", fmt_f64(*loss), fmt_f64(*acc), fmt_f64(*gap));
    }
    let mut out = Outputs::new();
    out.file(&args.out, |p| write_text(p, &csv))?;
    out.commit();

    let mut msg = String::from("variant   median eval_loss_itc  acc@1   modality_gap\n");
    for (name, loss, acc, gap) in &medians {
        let _ = writeln!(msg, "{name:<9} {loss:>20.4} {acc:>6.4} {gap:>14.4}");
    }
    Ok(msg)
}

#[derive(Debug, Args)]
pub struct VerifyMiArgs {
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest alphabet size of any text or view variable (2..=8).
    #[arg(long, default_value_t = 4)]
    pub max_alphabet: usize,
    /// Per-trial CSV report.
    #[arg(long, default_value = "verify_mi.csv")]
    pub report: PathBuf,
}

pub fn verify_mi(args: &VerifyMiArgs, config: Option<&Path>) -> Result<String> {
    let cfg = resolve(config, args.seed, |_| {})?;
    if args.trials == 0 {
        return Err(invalid("--trials must be at least 1"));
    }
    let limit = mi::EnumerationLimits::default().max_alphabet;
    if !(2..=limit).contains(&args.max_alphabet) {
        return Err(invalid(format!("--max-alphabet must lie in 2..={limit}, got {}", args.max_alphabet)));
    }
    let records: Vec<mi::TrialRecord> = (0..args.trials)
        .into_par_iter()
        .map(|t| mi::run_trial(cfg.seed, t, args.max_alphabet))
        .collect::<Result<_>>()?;
    let mut csv = Vec::new();
    mi::write_trials_csv(&records, &mut csv)?;
    let mut out = Outputs::new();
    out.file(&args.report, |p| Ok(fs::write(p, &csv)?))?;
    out.commit();
    let ok = records.iter().filter(|r| r.report.verdict).count();
    let worst = records.iter().map(|r| r.report.margin).fold(f64::INFINITY, f64::min);
    Ok(format!("{ok}/{} trials ok; smallest margin {worst:.3e}; report {}\n", records.len(), args.report.display()))
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics CSVs written by `train`. Each file is one run, labeled by its file stem.
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    /// Output directory for SVG charts and `summary.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

type Column = (&'static str, &'static str, fn(&EpochMetrics) -> f64);

pub const REPORT_COLUMNS: [Column; 8] = [
    ("loss_total", "loss_total", |m| m.loss_total),
    ("loss_itc", "loss_itc", |m| m.loss_itc),
    ("loss_timix_i2t", "loss_timix_i2t", |m| m.loss_timix_i2t),
    ("loss_timix_t2i", "loss_timix_t2i", |m| m.loss_timix_t2i),
    ("loss_pta", "loss_pta", |m| m.loss_pta),
    ("eval_loss_itc", "eval_loss_itc", |m| m.eval_loss_itc),
    ("acc@1", "acc_at_1", |m| m.acc_at_1),
    ("modality_gap", "modality_gap", |m| m.modality_gap),
];

pub fn report(args: &ReportArgs, config: Option<&Path>) -> Result<String> {
    resolve(config, None, |_| {})?;
    let mut runs: Vec<(String, Vec<EpochMetrics>)> = Vec::new();
    for p in &args.metrics {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if runs.iter().any(|(l, _)| *l == label) {
            return Err(invalid(format!("two metrics files share the label {label:?}")));
        }
        let rows = dataio::read_metrics_csv(File::open(p)?)?;
        if rows.is_empty() {
            return Err(invalid(format!("{} has no epochs", p.display())));
        }
        runs.push((label, rows));
    }
    let charts: Vec<(String, String)> = REPORT_COLUMNS
        .iter()
        .map(|(col, file, get)| {
            let series: Vec<Series> = runs
                .iter()
                .map(|(label, rows)| Series {
                    label: label.clone(),
                    points: rows.iter().map(|m| (m.epoch as f64, get(m))).collect(),
                })
                .collect();
            (format!("{file}.svg"), line_chart(col, "epoch", col, &series))
        })
        .collect();
    let summary = summarize(&runs);

    let mut out = Outputs::new();
    out.dir(&args.out)?;
    for (name, svg) in &charts {
        out.file(&args.out.join(name), |p| write_text(p, svg))?;
    }
    out.file(&args.out.join("summary.txt"), |p| write_text(p, &summary))?;
    out.commit();
    Ok(summary)
}

fn summarize(runs: &[(String, Vec<EpochMetrics>)]) -> String {
    let mut s = String::from("run                  epochs  loss_total  eval_loss_itc   acc@1  modality_gap\n");
    for (label, rows) in runs {
        let m = rows.last().expect("runs are non-empty");
        let _ = writeln!(
            s,
            "{label:<20} {:>6} {:>11.4} {:>14.4} {:>7.4} {:>13.4}",
            rows.len(),
            m.loss_total,
            m.eval_loss_itc,
            m.acc_at_1,
            m.modality_gap
        );
    }
    let best = |get: fn(&EpochMetrics) -> f64, lower: bool| {
        runs.iter()
            .map(|(l, rows)| (l, get(rows.last().expect("runs are non-empty"))))
            .filter(|(_, v)| v.is_finite())
            .min_by(|a, b| if lower { a.1.total_cmp(&b.1) } else { b.1.total_cmp(&a.1) })
            .map(|(l, v)| format!("{l} ({v:.4})"))
            .unwrap_or_else(|| "n/a".into())
    };
    let _ = writeln!(s, "lowest final eval_loss_itc: {}", best(|m| m.eval_loss_itc, true));
    let _ = writeln!(s, "highest final acc@1: {}", best(|m| m.acc_at_1, false));
    let _ = writeln!(s, "smallest final modality_gap: {}", best(|m| m.modality_gap, true));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, loss: f64, acc: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            loss_total: loss,
            loss_itc: loss,
            loss_timix_i2t: 0.0,
            loss_timix_t2i: 0.0,
            loss_pta: 0.0,
            eval_loss_itc: loss,
            acc_at_1: acc,
            modality_gap: 0.5,
        }
    }

    #[test]
    fn summary_names_the_best_runs() {
        let runs = vec![
            ("a".to_string(), vec![row(1, 3.0, 0.1), row(2, 2.0, 0.3)]),
            ("b".to_string(), vec![row(1, 2.5, 0.2)]),
        ];
        let s = summarize(&runs);
        assert!(s.contains("lowest final eval_loss_itc: a (2.0000)"));
        assert!(s.contains("highest final acc@1: a (0.3000)"));
    }

    #[test]
    fn ids_with_separators_are_rejected() {
        assert!(check_id("a/b").is_err());
        assert!(check_id("..").is_err());
        assert!(check_id("img_01").is_ok());
    }

    #[test]
    fn report_columns_cover_the_metrics_header() {
        let mut csv = Vec::new();
        dataio::write_metrics_csv(&[], &mut csv).unwrap();
        let header = String::from_utf8(csv).unwrap();
        for (col, _, _) in REPORT_COLUMNS {
            assert!(header.trim().split(',').any(|h| h == col), "{col}");
        }
    }
}
