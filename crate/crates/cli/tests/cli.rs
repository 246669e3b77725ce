use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specrec::array::Array2;
use specrec::io::{load_stack, parse_manifest, save_stack};
use specrec::phantom::Split;
use specrec::signal::{fwhm, reconstruct, Fringe, Provenance};

fn specrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrec"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &str = "\
seed = 3
phantom.n_eyes = 6
phantom.n_patients = 4
phantom.n_k = 64
phantom.width = 16
phantom.n_bscans = 2
pipeline.every_kth = 1
split.ratios = 0.5,0.25,0.25
model.res_blocks = 1
model.channels = 4
unet.depth = 2
unet.base = 4
disc.base = 4
disc.blocks = 2
train.epochs = 1
train.batch_size = 2
train.save_dir = run
";

fn tiny_dataset(dir: &Path) {
    fs::write(dir.join("c.txt"), TINY).unwrap();
    ok(&specrec(dir, &["phantom", "--config", "c.txt", "--out", "ds"]));
}

#[test]
fn default_cohort_has_three_patient_disjoint_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let out = specrec(tmp.path(), &["phantom", "--seed", "7", "--set", "phantom.n_bscans=1", "--out", "ds"]);
    ok(&out);
    let entries = parse_manifest(&fs::read_to_string(tmp.path().join("ds/manifest.tsv")).unwrap()).unwrap();
    assert_eq!(entries.len(), 24);
    let mut by_patient: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in &entries {
        by_patient.entry(&e.patient_id).or_default().insert(e.split);
        assert!(tmp.path().join("ds").join(&e.path).is_file());
    }
    assert!(by_patient.values().all(|s| s.len() == 1), "a patient spans splits");
    let splits: BTreeSet<Split> = entries.iter().map(|e| e.split).collect();
    assert_eq!(splits.len(), 3);
}

#[test]
fn phantom_is_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    ok(&specrec(tmp.path(), &["phantom", "--config", "c.txt", "--out", "again"]));
    for name in ["manifest.tsv", "dataset.txt", "eyes/P000_OD.oct1", "eyes/P003_OD.oct1"] {
        let a = fs::read(tmp.path().join("ds").join(name)).unwrap();
        let b = fs::read(tmp.path().join("again").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn all_train_ratios_put_every_eye_in_train() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.txt"), TINY).unwrap();
    ok(&specrec(tmp.path(), &["phantom", "--config", "c.txt", "--set", "split.ratios=1,0,0", "--out", "ds"]));
    let entries = parse_manifest(&fs::read_to_string(tmp.path().join("ds/manifest.tsv")).unwrap()).unwrap();
    assert!(entries.iter().all(|e| e.split == Split::Train));
}

fn single_reflector(n_k: usize, bin: f64) -> Array2 {
    Array2::from_fn(n_k, 1, |k, _| (2.0 * PI * bin * k as f64 / n_k as f64).cos())
}

#[test]
fn spectral_degrade_broadens_a_single_reflector() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = single_reflector(256, 40.0);
    save_stack(&tmp.path().join("gt.oct1"), std::slice::from_ref(&gt)).unwrap();
    ok(&specrec(
        tmp.path(),
        &["degrade", "--seed", "1", "--mode", "spectral", "--in", "gt.oct1", "--out", "w.oct1"],
    ));
    let windowed = load_stack(&tmp.path().join("w.oct1")).unwrap();
    let width = |a: &Array2| {
        let img = reconstruct(&Fringe::new(a.clone(), Provenance::GroundTruth).unwrap());
        fwhm(&img.pixels().column(0)).unwrap()
    };
    let (before, after) = (width(&gt), width(&windowed[0]));
    assert!(after > before, "fwhm {before} -> {after}");
}

#[test]
fn spatial_degrade_with_unit_filter_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let img = Array2::from_fn(20, 6, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.37 + 1e-3);
    save_stack(&tmp.path().join("in.oct1"), &[img.clone(), img.flip_vertical()]).unwrap();
    let out = specrec(
        tmp.path(),
        &["degrade", "--seed", "1", "--mode", "spatial", "--set", "degrade.mean_n=1", "--in", "in.oct1", "--out", "out.oct1"],
    );
    ok(&out);
    assert_eq!(fs::read(tmp.path().join("in.oct1")).unwrap(), fs::read(tmp.path().join("out.oct1")).unwrap());
}

#[test]
fn spatial_degrade_defaults_to_eleven_taps() {
    let tmp = tempfile::tempdir().unwrap();
    let mut img = Array2::zeros(41, 1);
    img.set(20, 0, 11.0);
    save_stack(&tmp.path().join("in.oct1"), &[img]).unwrap();
    ok(&specrec(tmp.path(), &["degrade", "--seed", "1", "--mode", "spatial", "--in", "in.oct1", "--out", "out.oct1"]));
    let out = &load_stack(&tmp.path().join("out.oct1")).unwrap()[0];
    let support: Vec<usize> = (0..41).filter(|&r| out.get(r, 0) != 0.0).collect();
    assert_eq!(support, (15..=25).collect::<Vec<_>>());
    assert!((out.get(20, 0) - 1.0).abs() < 1e-12);
}

#[test]
fn pgm_round_trip_is_within_one_level() {
    let tmp = tempfile::tempdir().unwrap();
    let img = Array2::from_fn(9, 13, |r, c| ((r * 13 + c) as f64 * 0.618).fract());
    save_stack(&tmp.path().join("a.oct1"), std::slice::from_ref(&img)).unwrap();
    ok(&specrec(tmp.path(), &["export-pgm", "a.oct1", "a.pgm"]));
    assert!(fs::read(tmp.path().join("a.pgm")).unwrap().starts_with(b"P5\n13 9\n255\n"));
    ok(&specrec(tmp.path(), &["import-pgm", "a.pgm", "b.oct1"]));
    let back = &load_stack(&tmp.path().join("b.oct1")).unwrap()[0];
    assert_eq!(back.shape(), img.shape());
    for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
    }
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = specrec(tmp.path(), &["gradcheck", "--seeds", "2"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("conv1d d=15 input"));
    let out = specrec(tmp.path(), &["gradcheck", "--seeds", "1", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_separate_usage_data_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(specrec(p, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(specrec(p, &["phantom", "--out", "ds"]).status.code(), Some(1), "missing seed");
    assert_eq!(specrec(p, &["phantom", "--seed", "1", "--set", "nope=1", "--out", "ds"]).status.code(), Some(1));
    fs::write(p.join("bad.txt"), "seed = 1\nsignal.alpha = wide\n").unwrap();
    let out = specrec(p, &["phantom", "--config", "bad.txt", "--out", "ds"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 24"));
    fs::write(p.join("bad.oct1"), b"OCT1\x02\x00\x00\x00").unwrap();
    let out = specrec(p, &["export-pgm", "bad.oct1", "x.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse error at byte"));
}

#[test]
fn seed_flag_completes_a_seedless_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.txt"), TINY.replace("seed = 3\n", "")).unwrap();
    ok(&specrec(tmp.path(), &["phantom", "--config", "c.txt", "--seed", "3", "--out", "ds"]));
    let resolved = fs::read_to_string(tmp.path().join("ds/dataset.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 3"));
}

#[test]
fn spatial_train_then_eval_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    ok(&specrec(tmp.path(), &["train", "--config", "c.txt", "--data", "ds"]));
    let run = tmp.path().join("run");
    assert!(run.join("config.txt").is_file());
    ok(&specrec(tmp.path(), &["eval", "--data", "ds", "--run", "run", "--out", "ev"]));
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv")).unwrap(),
        fs::read_to_string(tmp.path().join("ev/metrics.csv")).unwrap()
    );
}

#[test]
fn spectral_eval_scores_reconstructed_images() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    ok(&specrec(tmp.path(), &["train", "--config", "c.txt", "--set", "train.domain=spectral", "--data", "ds"]));
    let out = specrec(tmp.path(), &["eval", "--data", "ds", "--run", "run", "--domain", "spectral", "--out", "ev"]);
    ok(&out);
    let csv = fs::read_to_string(tmp.path().join("ev/metrics.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).contains("SSIM"));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.txt"), TINY).unwrap();
    let mut ckpts = Vec::new();
    for threads in ["1", "3"] {
        let out = Command::new(env!("CARGO_BIN_EXE_specrec"))
            .current_dir(tmp.path())
            .env("SPECREC_THREADS", threads)
            .env("RUST_LOG", "warn")
            .args(["phantom", "--config", "c.txt", "--out", &format!("ds{threads}")])
            .output()
            .unwrap();
        ok(&out);
        let out = Command::new(env!("CARGO_BIN_EXE_specrec"))
            .current_dir(tmp.path())
            .env("SPECREC_THREADS", threads)
            .env("RUST_LOG", "warn")
            .args(["train", "--config", "c.txt", "--set", &format!("train.save_dir=run{threads}"), "--data", &format!("ds{threads}")])
            .output()
            .unwrap();
        ok(&out);
        ckpts.push(fs::read(tmp.path().join(format!("run{threads}/ckpt_3_final.ckp1"))).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
    let bad = Command::new(env!("CARGO_BIN_EXE_specrec"))
        .current_dir(tmp.path())
        .env("SPECREC_THREADS", "zero")
        .args(["gradcheck", "--seeds", "1"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
