mod common;

use rand::Rng as _;
use timix::geometry::{PatchGrid, PatchLabels};
use timix::rng::seeded;
use timix::tpp::{PtaExample, TppModel};

use common::*;

fn separable(r: &mut timix::rng::Rng, d: usize, n: usize) -> PtaExample {
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    let features = labels
        .iter()
        .map(|&y| {
            let mut f: Vec<f64> = (0..d).map(|_| r.random_range(-0.1..0.1)).collect();
            f[0] += if y { 1.0 } else { -1.0 };
            f
        })
        .collect();
    let mut text = vec![0.0; d];
    text[1] = 1.0;
    PtaExample { features, text, labels: PatchLabels::new(labels) }
}

#[test]
fn separable_toy_is_learned_within_500_steps() {
    let mut r = seeded(31);
    let batch: Vec<PtaExample> = (0..8).map(|_| separable(&mut r, 4, 16)).collect();
    let mut model = TppModel::new(4, 8, 3);
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = model.pta_train_step(&batch, 0.5).unwrap();
        if loss < 0.1 {
            break;
        }
    }
    assert!(model.batch_loss(&batch).unwrap() < 0.1, "loss stayed at {loss}");
}

#[test]
fn small_steps_descend() {
    let mut r = seeded(32);
    for trial in 0..100 {
        let (d, dh) = (r.random_range(2..=6), r.random_range(2..=8));
        let mut model = random_tpp(&mut r, d, dh);
        let n = r.random_range(2..=10);
        let batch: Vec<PtaExample> = (0..3)
            .map(|_| PtaExample {
                features: (0..n).map(|_| gaussian_vec(&mut r, d)).collect(),
                text: gaussian_vec(&mut r, d),
                labels: PatchLabels::new((0..n).map(|_| r.random_bool(0.5)).collect()),
            })
            .collect();
        let before = model.pta_train_step(&batch, 1e-3).unwrap();
        let after = model.batch_loss(&batch).unwrap();
        assert!(after <= before, "trial {trial}: {after} > {before}");
    }
}

#[test]
fn forward_respects_grid_and_bounds() {
    let mut r = seeded(33);
    let grid = PatchGrid::new(64, 48, 16).unwrap();
    let model = random_tpp(&mut r, 5, 7);
    let feats: Vec<Vec<f64>> = (0..grid.len()).map(|_| gaussian_vec(&mut r, 5)).collect();
    let map = model.forward(&grid, &feats, &gaussian_vec(&mut r, 5)).unwrap();
    assert_eq!(map.scores().len(), 12);
    assert!(map.scores().iter().all(|&a| a > 0.0 && a < 1.0));
    assert!(model.forward(&grid, &feats[1..], &gaussian_vec(&mut r, 5)).is_err());
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tpp.json");
    let model = TppModel::new(6, 6, 99);
    model.save(&path).unwrap();
    assert_eq!(TppModel::load(&path).unwrap(), model);
}
