use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const PATCH: usize = 8;

fn timix(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_timix"));
    cmd.current_dir(dir).args(args).env_remove("TIMIX_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Deterministic RGB bytes that differ per image and per pixel.
fn pixels(w: usize, h: usize, salt: usize) -> Vec<u8> {
    (0..w * h * 3).map(|i| ((i * 7 + salt * 53 + (i / 3) * 11) % 256) as u8).collect()
}

fn write_ppm(path: &Path, w: usize, h: usize, data: &[u8]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).unwrap();
}

fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned();
    let mut fields = text.split_ascii_whitespace();
    assert_eq!(fields.next(), Some("P6"));
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    let header = format!("P6\n{w} {h}\n255\n").len();
    (w, h, bytes[header..].to_vec())
}

/// Writes `sizes.len()` images with one box each and returns the manifest path.
fn dataset(dir: &Path, sizes: &[(usize, usize)]) -> PathBuf {
    let mut lines = String::from("{\"version\":1}\n");
    for (k, &(w, h)) in sizes.iter().enumerate() {
        write_ppm(&dir.join(format!("img{k}.ppm")), w, h, &pixels(w, h, k));
        let caption = ["a red ball on grass", "a dog near a tree", "two cats on a sofa", "a boat on a lake"][k % 4];
        lines.push_str(&format!(
            "{{\"image_id\":\"img{k}\",\"image\":\"img{k}.ppm\",\"captions\":[\"{caption}\"],\"boxes\":[{{\"x0\":{},\"y0\":{},\"x1\":{},\"y1\":{}}}]}}\n",
            k % 3,
            1,
            w / 2 + k,
            h / 2
        ));
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines).unwrap();
    path
}

fn small_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, r#"{"feature_dim":8,"concepts":16,"size":64,"eval_size":32}"#).unwrap();
    path
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn verify_mi_ten_trials_all_ok_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    let o = timix(tmp.path(), &["verify-mi", "--trials", "10", "--seed", "7", "--report", "a.csv"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let verdict = header.iter().position(|h| *h == "verdict").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.split(',').nth(verdict) == Some("ok")));

    let o =
        timix(tmp.path(), &["--threads", "3", "verify-mi", "--trials", "10", "--seed", "7", "--report", "b.csv"], &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(tmp.path().join("a.csv")).unwrap(), fs::read(tmp.path().join("b.csv")).unwrap());
}

#[test]
fn config_and_seed_are_printed_before_work() {
    let tmp = TempDir::new().unwrap();
    let o = timix(tmp.path(), &["verify-mi", "--trials", "1", "--report", "r.csv"], &[("TIMIX_SEED", "42")]);
    assert_eq!(code(&o), 0);
    let err = stderr(&o);
    assert!(err.contains("config: {"), "{err}");
    assert!(err.contains("master seed: 42"), "{err}");
    let seed_col = fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    assert!(seed_col.lines().nth(1).is_some());
}

#[test]
fn seed_flag_beats_env_and_env_beats_config() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"seed":5}"#).unwrap();
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let mut args = vec!["--config", "cfg.json", "verify-mi", "--trials", "1", "--report", "r.csv"];
        args.extend_from_slice(extra);
        stderr(&timix(tmp.path(), &args, env))
    };
    assert!(run(&[], &[]).contains("master seed: 5"));
    assert!(run(&[], &[("TIMIX_SEED", "6")]).contains("master seed: 6"));
    assert!(run(&["--seed", "9"], &[("TIMIX_SEED", "6")]).contains("master seed: 9"));
}

#[test]
fn bad_config_and_env_are_validation_errors() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"sed":5}"#).unwrap();
    let o = timix(tmp.path(), &["--config", "cfg.json", "verify-mi", "--report", "r.csv"], &[]);
    assert_eq!(code(&o), 1);
    let o = timix(tmp.path(), &["verify-mi", "--report", "r.csv"], &[("TIMIX_SEED", "abc")]);
    assert_eq!(code(&o), 1);
    let o = timix(tmp.path(), &["verify-mi", "--max-alphabet", "9", "--report", "r.csv"], &[]);
    assert_eq!(code(&o), 1);
    let o = timix(tmp.path(), &["--config", "missing.json", "verify-mi", "--report", "r.csv"], &[]);
    assert_eq!(code(&o), 1);
    assert!(files(tmp.path()) == ["cfg.json"]);
}

#[test]
fn train_rejects_epochs_below_warmup_without_writing() {
    let tmp = TempDir::new().unwrap();
    let o = timix(
        tmp.path(),
        &["train", "--strategy", "timix", "--epochs", "1", "--warmup", "2", "--metrics", "m.csv"],
        &[],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("warmup"));
    assert!(files(tmp.path()).is_empty());
}

#[test]
fn mix_rejects_non_divisible_image() {
    let tmp = TempDir::new().unwrap();
    let manifest = dataset(tmp.path(), &[(32, 32), (30, 32)]);
    let o = timix(
        tmp.path(),
        &["--json-errors", "mix", "--manifest", manifest.to_str().unwrap(), "--patch", "8", "--out", "out"],
        &[],
    );
    assert_eq!(code(&o), 1);
    let err: serde_json::Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "BadDimensions");
    assert_eq!(err["exit_code"], 1);
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn mix_rejects_odd_count_and_mismatched_sizes() {
    let tmp = TempDir::new().unwrap();
    let manifest = dataset(tmp.path(), &[(32, 32), (32, 32), (32, 32)]);
    let o = timix(tmp.path(), &["mix", "--captions", manifest.to_str().unwrap(), "--patch", "8", "--out", "out"], &[]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let manifest = dataset(tmp.path(), &[(32, 32), (32, 24)]);
    let o = timix(tmp.path(), &["mix", "--manifest", manifest.to_str().unwrap(), "--patch", "8", "--out", "out"], &[]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("out").exists());
}

#[derive(serde::Deserialize)]
struct Win {
    #[serde(rename = "r")]
    top: usize,
    #[serde(rename = "c")]
    left: usize,
    h: usize,
    w: usize,
}

#[derive(serde::Deserialize)]
struct Rec {
    pair_id: String,
    gamma: f64,
    target_window: Win,
    source_window: Win,
    s_src: f64,
    s_tgt: f64,
    seed: u64,
}

#[test]
fn mix_writes_composites_matching_their_records() {
    let tmp = TempDir::new().unwrap();
    let (w, h) = (48, 32);
    let manifest = dataset(tmp.path(), &[(w, h); 4]);
    let args = ["mix", "--manifest", manifest.to_str().unwrap(), "--patch", "8", "--gamma-seed", "11"];
    let o = timix(tmp.path(), &[&args[..], &["--out", "a"]].concat(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("a");
    let names = files(&out);
    assert_eq!(names.len(), 5);

    let sidecar = fs::read_to_string(out.join("mixed.jsonl")).unwrap();
    let recs: Vec<Rec> = sidecar.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    let (rows, cols) = (h / PATCH, w / PATCH);
    let mut seen = Vec::new();
    for r in &recs {
        assert_eq!(r.seed, 11);
        assert!((0.25..=0.75).contains(&r.gamma));
        let eh = ((r.gamma * rows as f64).floor() as usize).max(1);
        let ew = ((r.gamma * cols as f64).floor() as usize).max(1);
        for win in [&r.target_window, &r.source_window] {
            assert_eq!((win.h, win.w), (eh, ew));
            assert!(win.top + win.h <= rows && win.left + win.w <= cols);
        }
        let s_src = (eh * ew * PATCH * PATCH) as f64 / (w * h) as f64;
        assert!((r.s_src - s_src).abs() < 1e-12 && (r.s_tgt - (1.0 - s_src)).abs() < 1e-12);

        let (t, s) = r.pair_id.split_once('+').unwrap();
        seen.push(t.to_string());
        let target = read_ppm(&tmp.path().join(format!("{t}.ppm"))).2;
        let source = read_ppm(&tmp.path().join(format!("{s}.ppm"))).2;
        let (mw, mh, mixed) = read_ppm(&out.join(format!("{}.ppm", r.pair_id)));
        assert_eq!((mw, mh), (w, h));
        let (tw, sw) = (&r.target_window, &r.source_window);
        for y in 0..h {
            for x in 0..w {
                let (pr, pc) = (y / PATCH, x / PATCH);
                let inside = pr >= tw.top && pr < tw.top + tw.h && pc >= tw.left && pc < tw.left + tw.w;
                let want = if inside {
                    let sy = y - tw.top * PATCH + sw.top * PATCH;
                    let sx = x - tw.left * PATCH + sw.left * PATCH;
                    &source[(sy * w + sx) * 3..][..3]
                } else {
                    &target[(y * w + x) * 3..][..3]
                };
                assert_eq!(&mixed[(y * w + x) * 3..][..3], want, "{} at ({y},{x})", r.pair_id);
            }
        }
    }
    seen.sort();
    assert_eq!(seen, ["img0", "img1", "img2", "img3"]);

    let o = timix(tmp.path(), &[&args[..], &["--threads", "2", "--out", "b"]].concat(), &[]);
    assert_eq!(code(&o), 0);
    for n in &names {
        assert_eq!(fs::read(out.join(n)).unwrap(), fs::read(tmp.path().join("b").join(n)).unwrap(), "{n}");
    }
}

#[test]
fn runtime_failure_removes_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let manifest = dataset(tmp.path(), &[(32, 32); 2]);
    let out = tmp.path().join("out");
    fs::create_dir_all(out.join("mixed.jsonl")).unwrap();
    let o = timix(tmp.path(), &["mix", "--manifest", manifest.to_str().unwrap(), "--patch", "8", "--out", "out"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(files(&out), ["mixed.jsonl"]);
}

#[test]
fn train_tpp_checkpoint_feeds_mix() {
    let tmp = TempDir::new().unwrap();
    let manifest = dataset(tmp.path(), &[(32, 32); 4]);
    fs::write(
        tmp.path().join("ann.jsonl"),
        "{\"image_id\":\"img1\",\"width\":32,\"height\":32,\"boxes\":[{\"x0\":16,\"y0\":16,\"x1\":32,\"y1\":32,\"caption\":\"a tree\"}]}\n",
    )
    .unwrap();
    let m = manifest.to_str().unwrap();
    let train = [
        "train-tpp",
        "--manifest",
        m,
        "--annotations",
        "ann.jsonl",
        "--patch",
        "8",
        "--epochs",
        "40",
        "--lr",
        "0.5",
        "--out",
        "tpp.json",
        "--log",
        "tpp.csv",
    ];
    let o = timix(tmp.path(), &train, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(tmp.path().join("tpp.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 40);
    assert!(losses[39] < losses[0], "{losses:?}");
    let first = fs::read(tmp.path().join("tpp.json")).unwrap();
    assert_eq!(code(&timix(tmp.path(), &train, &[])), 0);
    assert_eq!(first, fs::read(tmp.path().join("tpp.json")).unwrap());

    let o = timix(tmp.path(), &["mix", "--manifest", m, "--patch", "8", "--tpp", "tpp.json", "--out", "mixed"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(files(&tmp.path().join("mixed")).len(), 5);

    let o = timix(tmp.path(), &["mix", "--manifest", m, "--patch", "8", "--tpp", "nope.json", "--out", "x"], &[]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn train_tpp_rejects_unknown_annotation_image() {
    let tmp = TempDir::new().unwrap();
    let manifest = dataset(tmp.path(), &[(32, 32); 2]);
    fs::write(tmp.path().join("ann.jsonl"), "{\"image_id\":\"zzz\",\"width\":32,\"height\":32,\"boxes\":[]}\n")
        .unwrap();
    let o = timix(
        tmp.path(),
        &[
            "train-tpp",
            "--manifest",
            manifest.to_str().unwrap(),
            "--annotations",
            "ann.jsonl",
            "--patch",
            "8",
            "--out",
            "t.json",
        ],
        &[],
    );
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("t.json").exists());
}

#[test]
fn train_metrics_are_byte_identical_and_reported() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path());
    let s = spec.to_str().unwrap();
    let base = ["train", "--spec", s, "--epochs", "3", "--warmup", "1", "--batch-size", "16", "--seed", "4"];
    for (strategy, file) in [("timix", "timix.csv"), ("none", "none.csv")] {
        let o = timix(tmp.path(), &[&base[..], &["--strategy", strategy, "--metrics", file]].concat(), &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = timix(tmp.path(), &[&base[..], &["--strategy", "timix", "--metrics", "again.csv"]].concat(), &[]);
    assert_eq!(code(&o), 0);
    let a = fs::read_to_string(tmp.path().join("timix.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(tmp.path().join("again.csv")).unwrap());
    let header = a.lines().next().unwrap();
    for col in ["epoch", "loss_total", "loss_timix_i2t", "loss_timix_t2i", "loss_pta", "acc@1", "modality_gap"] {
        assert!(header.split(',').any(|h| h == col), "{col}");
    }
    assert_eq!(a.lines().count(), 4);

    let o = timix(tmp.path(), &["report", "--metrics", "timix.csv", "none.csv", "--out", "rep"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = tmp.path().join("rep");
    let names = files(&rep);
    assert!(names.contains(&"loss_total.svg".to_string()) && names.contains(&"summary.txt".to_string()));
    let svg = fs::read_to_string(rep.join("loss_total.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">timix<") && svg.contains(">none<"));
    let summary = fs::read_to_string(rep.join("summary.txt")).unwrap();
    assert!(summary.contains("timix") && summary.contains("lowest final eval_loss_itc"));

    let o = timix(tmp.path(), &["report", "--metrics", "timix.csv", "none.csv", "--out", "rep2"], &[]);
    assert_eq!(code(&o), 0);
    for n in &names {
        assert_eq!(fs::read(rep.join(n)).unwrap(), fs::read(tmp.path().join("rep2").join(n)).unwrap());
    }

    let o = timix(tmp.path(), &["report", "--metrics", "missing.csv", "--out", "rep3"], &[]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("rep3").exists());
}

#[test]
fn ablate_table_has_every_variant_seed_and_median() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path());
    let args = ["ablate", "--spec", spec.to_str().unwrap(), "--seeds", "1,2", "--epochs", "2", "--warmup", "1"];
    let o = timix(tmp.path(), &[&args[..], &["--out", "a.csv"]].concat(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    for v in ["full", "no-pta", "no-mix", "none"] {
        for s in ["1", "2", "median"] {
            assert!(rows.iter().any(|r| r[0] == v && r[1] == s), "{v} {s}");
        }
    }
    let o = timix(tmp.path(), &[&args[..], &["--threads", "2", "--out", "b.csv"]].concat(), &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(table, fs::read_to_string(tmp.path().join("b.csv")).unwrap());
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&timix(tmp.path(), &["frobnicate"], &[])), 1);
    assert_eq!(code(&timix(tmp.path(), &["train", "--strategy", "bogus", "--metrics", "m.csv"], &[])), 1);
    assert_eq!(code(&timix(tmp.path(), &["--threads", "0", "verify-mi"], &[])), 1);
    let help = timix(tmp.path(), &["--help"], &[]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["mix", "train-tpp", "train", "ablate", "verify-mi", "report"] {
        assert!(text.contains(sub), "{sub}");
    }
    assert!(files(tmp.path()).is_empty());
}
