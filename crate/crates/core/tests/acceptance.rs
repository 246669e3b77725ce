//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! `SPECREC_ACCEPTANCE=1,4,9` runs a subset; the default is all nine.
//! Criteria 6 and 7 train desk-scale models and dominate the runtime.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use specrec::array::Array2;
use specrec::autodiff::{decode_ckp1, encode_ckp1, layer_suite, Graph, Precision, Tensor, LAYER_TOL};
use specrec::config::RunConfig;
use specrec::io::{decode_oct1, encode_oct1};
use specrec::metrics::{mse, nrmse, psnr, ssim, Comparison};
use specrec::models::{Discriminator, DiscriminatorConfig, Network, SrganGenerator, SrganGeneratorConfig};
use specrec::phantom::{concat_strips, largest_remainder, split_by_patient, to_strips, Split};
use specrec::pipeline::{build_pairs, phantom_cohort, train_and_evaluate, PairOptions};
use specrec::signal::{apply_spectral_window, argmax, fwhm, gausswin, reconstruct, BScan, Fringe, Provenance, ValueDomain, WindowSpec};
use specrec::train::{checkpoint_rule, gan_step, BestSoFar, Batch, GanModels, LossReport, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---- 1 ---------------------------------------------------------------

fn gausswin_closed_form(n: usize, alpha: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let half = (n - 1) as f64 / 2.0;
    (0..n)
        .map(|i| {
            let t = alpha * (i as f64 - half) / half;
            (-0.5 * t * t).exp()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1, 3, 64, 1024] {
        for alpha in [2.0, 4.0, 8.0] {
            let w = gausswin(n, alpha).expect("valid window");
            let o = gausswin_closed_form(n, alpha);
            assert_eq!(w.len(), n);
            worst = w.iter().zip(&o).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    outcome(worst <= 1e-12, format!("max |gausswin - closed form| = {worst:.2e} (tol 1e-12)"))
}

// ---- 2 ---------------------------------------------------------------

fn column(values: Vec<f64>) -> Fringe {
    let n = values.len();
    Fringe::new(Array2::from_vec(n, 1, values).unwrap(), Provenance::GroundTruth).unwrap()
}

fn reflector(n: usize, bin: f64) -> Fringe {
    column((0..n).map(|k| (2.0 * PI * bin * k as f64 / n as f64).cos()).collect())
}

fn criterion_2() -> Outcome {
    // Parseval on random fringes, using an independent FFT of the samples.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut parseval: f64 = 0.0;
    for n in [64usize, 256, 1024] {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let spectral = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        parseval = parseval.max(rel(spectral, energy));
    }

    // Peak location and width of a single reflector under centred windows.
    let n = 1024;
    let f = reflector(n, 200.0);
    let peak = argmax(&reconstruct(&f).pixels().column(0));
    let mut peaks_ok = true;
    let mut widths = BTreeMap::new();
    for alpha in [2.0, 4.0, 8.0, 16.0] {
        let w = apply_spectral_window(&f, &WindowSpec::centered(n, alpha).unwrap()).unwrap();
        let profile = reconstruct(&w).pixels().column(0);
        peaks_ok &= argmax(&profile) == peak;
        widths.insert((alpha * 10.0) as u32, fwhm(&profile).unwrap_or(f64::NAN));
    }
    let mut doubling_ok = true;
    let mut ratios = Vec::new();
    for (a, b) in [(20u32, 40u32), (40, 80), (80, 160)] {
        let (wa, wb) = (widths[&a], widths[&b]);
        if wa < 4.0 {
            continue;
        }
        let r = wb / wa;
        ratios.push(r);
        doubling_ok &= (r - 2.0).abs() <= 0.15 * 2.0;
    }
    let pass = parseval < 1e-9 && peaks_ok && doubling_ok && !ratios.is_empty();
    outcome(
        pass,
        format!(
            "parseval rel {parseval:.1e} (tol 1e-9); peak fixed {peaks_ok}; FWHM {:?} px; doubling ratios {ratios:.3?} (2 ± 15%)",
            widths.values().map(|w| (w * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

// ---- 3 ---------------------------------------------------------------

/// Nested-loop cross-correlation with strides, dilations and zero padding.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &Tensor, w: &Tensor, stride: (usize, usize), dil: (usize, usize), pad: (usize, usize)) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad.0 - dil.0 * (kh - 1) - 1) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - dil.1 * (kw - 1) - 1) / stride.1 + 1;
    let xd = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let r = (i * stride.0 + ki * dil.0) as isize - pad.0 as isize;
                                let s = (j * stride.1 + kj * dil.1) as isize - pad.1 as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += xd[((b * c + ic) * h + r as usize) * wd + s as usize] * wv[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn criterion_3() -> Outcome {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut layers = HashSet::new();
    let seeds = 20;
    for seed in 0..seeds {
        for c in layer_suite(seed).expect("suite runs") {
            layers.insert(c.name.clone());
            if c.max_rel_err > worst.0 {
                worst = (c.max_rel_err, c.name);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut oracle: f64 = 0.0;
    type Case = ([usize; 4], [usize; 4], (usize, usize), (usize, usize), (usize, usize));
    let cases: [Case; 6] = [
        ([2, 3, 9, 7], [4, 3, 3, 3], (1, 1), (1, 1), (1, 1)),
        ([1, 2, 11, 8], [3, 2, 3, 3], (2, 2), (1, 1), (1, 0)),
        ([2, 2, 40, 1], [2, 2, 3, 1], (1, 1), (15, 1), (15, 0)),
        ([2, 2, 12, 5], [3, 2, 3, 1], (1, 1), (3, 1), (3, 0)),
        ([1, 3, 10, 10], [2, 3, 2, 4], (2, 1), (2, 2), (0, 3)),
        ([3, 1, 16, 4], [5, 1, 5, 1], (1, 1), (2, 1), (4, 0)),
    ];
    for (xs, ws, stride, dil, pad) in cases {
        let x = random_tensor(&xs, &mut rng);
        let w = random_tensor(&ws, &mut rng);
        let mut g = Graph::new(Precision::F64);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, dil, pad).expect("fits");
        let (shape, expect) = conv_oracle(&x, &w, stride, dil, pad);
        assert_eq!(g.value(y).shape(), &shape[..]);
        oracle = g.value(y).data().iter().zip(&expect).fold(oracle, |m, (a, b)| m.max((a - b).abs()));
    }
    for dilation in [1usize, 2, 3, 15] {
        let x = random_tensor(&[2, 3, 48], &mut rng);
        let w = random_tensor(&[2, 3, 3], &mut rng);
        let mut g = Graph::new(Precision::F64);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(xv, wv, None, 1, dilation, true).expect("fits");
        let x4 = Tensor::new(&[2, 3, 48, 1], x.data().to_vec()).unwrap();
        let w4 = Tensor::new(&[2, 3, 3, 1], w.data().to_vec()).unwrap();
        let (_, expect) = conv_oracle(&x4, &w4, (1, 1), (dilation, 1), (dilation, 0));
        oracle = g.value(y).data().iter().zip(&expect).fold(oracle, |m, (a, b)| m.max((a - b).abs()));
    }
    let required = ["conv1d d=1", "conv1d d=2", "conv1d d=3", "conv1d d=15", "conv2d", "batch norm", "prelu", "leaky relu", "tanh", "sigmoid", "dense"];
    let covered = required.iter().all(|r| layers.iter().any(|l| l.starts_with(r)));
    outcome(
        worst.0 < LAYER_TOL && oracle <= 1e-12 && covered,
        format!(
            "{} checks x {seeds} seeds, worst rel err {:.2e} ({}) (tol {LAYER_TOL:e}); conv oracle max abs {oracle:.1e} (tol 1e-12)",
            layers.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---- 4 ---------------------------------------------------------------

fn mse_direct(a: &Array2, b: &Array2) -> f64 {
    let mut s = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            s += (a.get(r, c) - b.get(r, c)).powi(2);
        }
    }
    s / (a.rows() * a.cols()) as f64
}

fn ssim_direct(a: &Array2, b: &Array2, l: f64) -> f64 {
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=a.rows() - 11 {
        for c in 0..=a.cols() - 11 {
            let mean = |img: &Array2| {
                let mut m = 0.0;
                for (i, row) in k.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        m += v / total * img.get(r + i, c + j);
                    }
                }
                m
            };
            let (ma, mb) = (mean(a), mean(b));
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (i, row) in k.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let (x, y) = (a.get(r + i, c + j) - ma, b.get(r + i, c + j) - mb);
                    va += v / total * x * x;
                    vb += v / total * y * y;
                    cov += v / total * x * y;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let a = Array2::from_fn(64, 64, |_, _| rng.random::<f64>());
        let noise: f64 = rng.random_range(0.01..0.5);
        let b = Array2::from_fn(64, 64, |r, c| (a.get(r, c) + noise * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0));
        let m = mse_direct(&a, &b);
        let (lo, hi) = b.min_max().unwrap();
        let checks = [
            (mse(&a, &b).unwrap(), m),
            (nrmse(&a, &b).unwrap(), m.sqrt() / (hi - lo)),
            (psnr(&a, &b, 1.0).unwrap(), 10.0 * (1.0 / m).log10()),
            (ssim(&a, &b, 1.0).unwrap(), ssim_direct(&a, &b, 1.0)),
        ];
        worst = checks.iter().fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    let x = Array2::from_fn(64, 64, |r, c| ((r * 31 + c * 17) % 97) as f64 / 97.0);
    let self_ssim = ssim(&x, &x, 1.0).unwrap();
    // One pixel in a hundred off by exactly 1 gives mse = 0.01.
    let mut y = Array2::zeros(10, 10);
    y.set(3, 7, 1.0);
    let p = psnr(&Array2::zeros(10, 10), &y, 1.0).unwrap();
    outcome(
        worst <= 1e-6 && self_ssim == 1.0 && p == 20.0,
        format!("max |fast - direct| {worst:.1e} (tol 1e-6); ssim(x,x) = {self_ssim}; psnr(L=1, mse=0.01) = {p} dB"),
    )
}

// ---- 5 ---------------------------------------------------------------

/// Whether families can be packed into splits of exactly `targets` eyes.
fn packing_exists(sizes: &[usize], targets: [usize; 3]) -> bool {
    let mut reach: HashSet<(usize, usize)> = HashSet::from([(0, 0)]);
    for &s in sizes {
        let mut next = HashSet::new();
        for &(a, b) in &reach {
            next.insert((a, b));
            if a + s <= targets[0] {
                next.insert((a + s, b));
            }
            if b + s <= targets[1] {
                next.insert((a, b + s));
            }
        }
        reach = next;
    }
    reach.contains(&(targets[0], targets[1]))
}

fn hamilton_ok(total: usize, ratios: [f64; 3], counts: [usize; 3]) -> bool {
    let quotas = ratios.map(|r| r * total as f64);
    let up: Vec<bool> = (0..3).map(|i| counts[i] as f64 > quotas[i].floor()).collect();
    let floors_ok = (0..3).all(|i| counts[i] == quotas[i].floor() as usize + usize::from(up[i]));
    let rem = |i: usize| quotas[i] - quotas[i].floor();
    let order_ok = (0..3).all(|i| (0..3).all(|j| !(up[i] && !up[j]) || rem(i) >= rem(j) - 1e-12));
    floors_ok && counts.iter().sum::<usize>() == total && order_ok
}

fn cohort(sizes: &[usize]) -> Vec<(String, String)> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(p, &n)| (0..n).map(move |e| (format!("P{p}"), format!("P{p}E{e}"))))
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut exact = 0;
    for inst in 0..1000 {
        let n_patients = rng.random_range(3..30);
        let sizes: Vec<usize> = (0..n_patients).map(|_| rng.random_range(1..=2)).collect();
        let raw = [rng.random_range(0.2..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
        let sum: f64 = raw.iter().sum();
        let ratios = raw.map(|r| r / sum);
        let eyes = cohort(&sizes);
        let s = match split_by_patient(&eyes, ratios, inst) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("instance {inst}: {e}"));
                continue;
            }
        };
        let mut seen = HashSet::new();
        let mut by_patient: BTreeMap<&str, HashSet<Split>> = BTreeMap::new();
        for split in Split::ALL {
            for e in s.get(split) {
                seen.insert(e.clone());
                let patient = eyes.iter().find(|(_, id)| id == e).unwrap().0.as_str();
                by_patient.entry(patient).or_default().insert(split);
            }
        }
        if seen.len() != eyes.len() || s.counts().iter().sum::<usize>() != eyes.len() {
            failures.push(format!("instance {inst}: eyes lost or duplicated"));
        }
        if by_patient.values().any(|v| v.len() != 1) {
            failures.push(format!("instance {inst}: patient spans splits"));
        }
        let targets = largest_remainder(eyes.len(), ratios);
        if !hamilton_ok(eyes.len(), ratios, targets) {
            failures.push(format!("instance {inst}: rounding {targets:?} for {ratios:?}"));
        }
        if packing_exists(&sizes, targets) {
            exact += 1;
            if s.counts() != targets {
                failures.push(format!("instance {inst}: counts {:?} != {targets:?}", s.counts()));
            }
        }
    }
    let mut families = vec![2; 8];
    families.extend([1; 19]);
    let clinical_counts = split_by_patient(&cohort(&families), [0.6, 0.2, 0.2], 0).unwrap().counts();

    let mut round_trips = true;
    for i in 0..50u64 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..40));
        let img = BScan::new(Array2::from_fn(h, w, |_, _| rng.random::<f64>()), ValueDomain::LinearMagnitude).unwrap();
        let sw = rng.random_range(1..=w);
        if w % sw == 0 {
            round_trips &= concat_strips(&to_strips(&img, sw).unwrap()).unwrap() == img;
        }
        let dims: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let data: Vec<f64> = (0..dims.iter().product::<usize>()).map(|_| (rng.random::<f32>() * 1e3) as f64).collect();
        let bytes = encode_oct1(&dims, &data).unwrap();
        round_trips &= decode_oct1(&bytes).unwrap() == (dims.clone(), data.clone());
        round_trips &= encode_oct1(&dims, &decode_oct1(&bytes).unwrap().1).unwrap() == bytes;
        let t = Tensor::new(&dims, data).unwrap();
        let name = format!("layer{i}.weight");
        let ck = encode_ckp1([(name.as_str(), &t)]).unwrap();
        round_trips &= decode_ckp1(&ck).unwrap() == vec![(name, t)];
    }
    let pass = failures.is_empty() && clinical_counts == [21, 7, 7] && round_trips;
    outcome(
        pass,
        format!(
            "1000 instances ({exact} exactly packable), {} violations{}; 35/27 -> {clinical_counts:?}; round trips bit-exact {round_trips}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// ---- 6, 7 -------------------------------------------------------------

struct TrendRun {
    seed: u64,
    gen_ssim: f64,
    deg_ssim: f64,
    gen_nrmse: f64,
    deg_nrmse: f64,
}

fn trend_run(base: &str, seed: u64) -> TrendRun {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(&format!("seed = {seed}\n{base}")).unwrap();
    cfg.set("train.save_dir", dir.path().to_str().unwrap()).unwrap();
    let (eyes, split) = phantom_cohort(&cfg).unwrap();
    let n_k = eyes[0].volume[0].n_k();
    let pairs = build_pairs(&eyes, &split, &PairOptions::from_config(&cfg, n_k).unwrap()).unwrap();
    let out = train_and_evaluate(&cfg, &pairs).unwrap();
    let (g, d) = (out.report.summary(Comparison::Generated), out.report.summary(Comparison::Degraded));
    TrendRun {
        seed,
        gen_ssim: g.ssim.mean,
        deg_ssim: d.ssim.mean,
        gen_nrmse: g.nrmse.mean,
        deg_nrmse: d.nrmse.mean,
    }
}

/// Cohort: 24 eyes, 18/3/3 by eye, 256-row B-scans 64 A-scans wide, log scale.
const COHORT: &str = "\
phantom.n_eyes = 24
phantom.width = 64
split.ratios = 0.75,0.125,0.125
signal.alpha = 8
signal.log = true
";

fn criterion_6() -> Outcome {
    let base = format!(
        "{COHORT}phantom.n_k = 512
train.domain = spatial
model.res_blocks = 4
model.channels = 16
train.lambda_adv = 1e-3
train.beta1 = 0.5
train.lr_g = 1e-4
train.lr_d = 1e-4
train.batch_size = 8
train.max_steps = 2000
train.epochs = 1000000
"
    );
    let runs: Vec<TrendRun> = (0..3).map(|s| trend_run(&base, s)).collect();
    let pass = runs.iter().all(|r| r.gen_ssim > r.deg_ssim && r.gen_nrmse < r.deg_nrmse);
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: ssim {:.4} vs {:.4}, nrmse {:.4} vs {:.4}",
                r.seed, r.gen_ssim, r.deg_ssim, r.gen_nrmse, r.deg_nrmse
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, format!("generated vs windowed: {detail}"))
}

fn criterion_7() -> Outcome {
    let base = format!(
        "{COHORT}phantom.n_k = 256
train.domain = spectral
unet.depth = 3
unet.dilations = 1,3,15
unet.input_skip = true
train.epochs = 15
"
    );
    let runs: Vec<TrendRun> = (0..3).map(|s| trend_run(&base, s)).collect();
    let pass = runs.iter().all(|r| r.gen_ssim > r.deg_ssim);
    let detail = runs
        .iter()
        .map(|r| format!("seed {}: ssim {:.4} vs {:.4}", r.seed, r.gen_ssim, r.deg_ssim))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, format!("reconstructed generated vs windowed: {detail}"))
}

// ---- 8 ---------------------------------------------------------------

fn criterion_8() -> Outcome {
    let config = TrainConfig {
        lambda_adv: 0.0,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (h, w) = (64, 16);
    let g = SrganGenerator::new(SrganGeneratorConfig::desk(), 8).unwrap();
    let d = Discriminator::new(DiscriminatorConfig::light((1, h, w), 8, 3, (3, 3), false), 9).unwrap();
    let mut a = GanModels::new(g, d, &config).unwrap();
    let mut b = a.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let perturb = |m: &mut GanModels<SrganGenerator>, rng: &mut ChaCha8Rng| {
        for p in m.discriminator.params_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    };
    perturb(&mut b, &mut rng);
    let mut identical = true;
    let mut d_differs = false;
    for step in 0..100 {
        let pairs: Vec<(Array2, Array2)> = (0..4)
            .map(|_| {
                let gt = Array2::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
                (gt.map(|v| 0.5 * v), gt)
            })
            .collect();
        let refs: Vec<&(Array2, Array2)> = pairs.iter().collect();
        let batch = Batch::from_pairs(&refs).unwrap();
        if step == 50 {
            perturb(&mut b, &mut rng);
        }
        let ra = gan_step(&batch, &mut a, &config, step, 1).unwrap();
        let rb = gan_step(&batch, &mut b, &config, step, 1).unwrap();
        identical &= ra.i_mse.to_bits() == rb.i_mse.to_bits();
        identical &= a.generator.params().named() == b.generator.params().named();
        d_differs |= ra.i_gt != rb.i_gt;
    }
    outcome(
        identical && d_differs,
        format!("100 steps, generator bitwise identical {identical}; discriminators differ {d_differs}"),
    )
}

// ---- 9 ---------------------------------------------------------------

fn criterion_9() -> Outcome {
    // (i_mse, i_gt, i_generated) per step and the expected save tag.
    let script: [((f64, f64, f64), Option<&str>); 10] = [
        ((1.00, 0.50, 0.50), Some("i_mse+i_gt+i_generated")),
        ((0.90, 0.40, 0.40), Some("i_mse")),
        ((0.95, 0.60, 0.30), Some("i_gt")),
        ((0.95, 0.50, 0.70), Some("i_generated")),
        ((0.95, 0.50, 0.50), None),
        ((0.80, 0.70, 0.50), Some("i_mse+i_gt")),
        ((0.85, 0.60, 0.80), Some("i_generated")),
        ((0.85, 0.60, 0.60), None),
        ((0.70, 0.60, 0.90), Some("i_mse+i_generated")),
        ((0.70, 0.70, 0.90), None),
    ];
    let mut best = BestSoFar::default();
    let mut got = Vec::new();
    for (step, ((i_mse, i_gt, i_generated), _)) in script.iter().enumerate() {
        let report = LossReport {
            step,
            epoch: step + 1,
            i_mse: *i_mse,
            i_gt: *i_gt,
            i_generated: *i_generated,
            g_adv: 0.0,
        };
        let (reason, next) = checkpoint_rule(&best, &report);
        got.push(reason.map(|r| r.tag()));
        best = next;
    }
    let expected: Vec<Option<String>> = script.iter().map(|(_, e)| e.map(str::to_string)).collect();
    let saves = got.iter().filter(|g| g.is_some()).count();
    outcome(got == expected, format!("{saves} saves in 10 steps, reasons match script: {}", got == expected))
}

// ----------------------------------------------------------------------

/// `(criterion, runtime budget, whether the budget assumes 4 cores)`.
const BUDGETS: [(usize, u64, bool); 9] = [
    (1, 1, false),
    (2, 10, false),
    (3, 120, false),
    (4, 30, false),
    (5, 30, false),
    (6, 1800, true),
    (7, 2700, true),
    (8, 120, false),
    (9, 1, false),
];

#[test]
fn acceptance() {
    let wanted: Option<HashSet<usize>> = std::env::var("SPECREC_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as u64;
    let criteria: [fn() -> Outcome; 9] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
    ];
    let mut failed = Vec::new();
    for ((n, budget, four_core), run) in BUDGETS.into_iter().zip(criteria) {
        if wanted.as_ref().is_some_and(|w| !w.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let elapsed = t0.elapsed();
        // A four-core budget stretches in proportion on fewer cores.
        let allowed = if four_core {
            Duration::from_secs(budget * 4 / cores.min(4))
        } else {
            Duration::from_secs(budget)
        };
        let in_time = elapsed <= allowed;
        let pass = out.pass && in_time;
        // Straight to the handle: libtest captures `println!` of passing tests.
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(
            stdout,
            "criterion {n}: {} | {} | {:.1}s (budget {}s{})",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            allowed.as_secs(),
            if four_core { format!(", scaled from 4 cores to {}", cores.min(4)) } else { String::new() }
        );
        if !pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
