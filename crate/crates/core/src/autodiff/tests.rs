use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Nested-loop cross-correlation oracle on `[N, C, H, W]`.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    dilation: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad.0 - dilation.0 * (kh - 1) - 1) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - dilation.1 * (kw - 1) - 1) / stride.1 + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride.0 + i * dilation.0) as isize - pad.0 as isize;
                                let ix = (xx * stride.1 + j * dilation.1) as isize - pad.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.data()[((oc * c + ic) * kh + i) * kw + j]
                                        * x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let y = g.conv1d(x, k, None, 1, 1, false).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0]);
    let y = g.conv1d(x, k, None, 1, 2, false).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    let one = g.constant(t(&[1, 1, 1], &[1.0]));
    for d in [1, 2, 7] {
        let y = g.conv1d(x, one, None, 1, d, true).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn conv1d_kernel_too_wide_is_shape_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
    assert!(matches!(g.conv1d(x, k, None, 1, 2, false), Err(crate::Error::Shape(_))));
    let k2 = g.constant(t(&[1, 2, 3], &[1.0; 6]));
    assert!(matches!(g.conv1d(x, k2, None, 1, 1, true), Err(crate::Error::Shape(_))));
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new(Precision::F64);
    let xt = random(&[1, 1, 5, 5], &mut rng);
    let x = g.constant(xt.clone());
    let zeros = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let y = g.conv2d(x, zeros, None, (1, 1), (1, 1), (0, 0)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let two = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, two, None, (1, 1), (1, 1), (0, 0)).unwrap();
    for (a, b) in g.value(y).data().iter().zip(xt.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [
        ((2, 3, 7, 6), (4, 3, 3, 3), (1, 1), (1, 1), (0, 0)),
        ((1, 2, 9, 8), (3, 2, 3, 2), (2, 2), (1, 1), (1, 1)),
        ((3, 1, 16, 1), (2, 1, 3, 1), (1, 1), (3, 1), (3, 0)),
        ((2, 2, 32, 1), (2, 2, 3, 1), (2, 1), (1, 1), (1, 0)),
        ((1, 1, 5, 5), (1, 1, 3, 3), (1, 1), (2, 2), (2, 2)),
        ((2, 3, 10, 5), (4, 3, 5, 1), (1, 1), (2, 1), (4, 0)),
        ((1, 2, 8, 3), (3, 2, 3, 1), (1, 1), (1, 1), (0, 0)),
        ((1, 2, 6, 4), (2, 2, 1, 3), (1, 1), (1, 1), (0, 1)),
    ];
    for (xs, ws, stride, dil, pad) in cases {
        let xt = random(&[xs.0, xs.1, xs.2, xs.3], &mut rng);
        let wt = random(&[ws.0, ws.1, ws.2, ws.3], &mut rng);
        let mut g = Graph::new(Precision::F64);
        let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
        let y = g.conv2d(x, w, None, stride, dil, pad).unwrap();
        let oracle = conv_oracle(&xt, &wt, stride, dil, pad);
        assert_eq!(g.shape(y), oracle.shape());
        assert!(max_abs_diff(g.value(y).data(), oracle.data()) < 1e-12);
    }
}

#[test]
fn f32_precision_is_close_to_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random(&[2, 4, 12, 5], &mut rng);
    let wt = random(&[6, 4, 3, 1], &mut rng);
    let run = |p| {
        let mut g = Graph::new(p);
        let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
        let y = g.conv2d(x, w, None, (1, 1), (1, 1), (1, 0)).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(Precision::F64), run(Precision::F32));
    assert!(max_abs_diff(a.data(), b.data()) < 1e-5);
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::full(&[4, 1], 3.0));
    let one = g.constant(t(&[1], &[1.0]));
    let zero = g.constant(t(&[1], &[0.0]));
    let (y, _) = g.batch_norm(x, one, zero, BnStats::Batch, 1e-3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let xr = g.constant(t(&[3, 1, 2], &[0.5, -2.0, 1.0, 4.0, 0.0, 3.0]));
    let beta = g.constant(t(&[1], &[0.7]));
    let (y, _) = g.batch_norm(xr, zero, beta, BnStats::Batch, 1e-3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    let pair = g.constant(t(&[2, 1], &[-1.0, 1.0]));
    let (y, m) = g.batch_norm(pair, one, zero, BnStats::Batch, 1e-12).unwrap();
    assert!(max_abs_diff(g.value(y).data(), &[-1.0, 1.0]) < 1e-11);
    let m = m.unwrap();
    assert_eq!(m.mean, vec![0.0]);
    assert_eq!(m.var, vec![1.0]);

    let single = g.constant(t(&[1, 1], &[2.0]));
    assert!(matches!(
        g.batch_norm(single, one, zero, BnStats::Batch, 1e-3),
        Err(crate::Error::Domain(_))
    ));
    let (y, m) = g
        .batch_norm(
            single,
            one,
            zero,
            BnStats::Running {
                mean: &[1.0],
                var: &[4.0],
            },
            0.0,
        )
        .unwrap();
    assert!(m.is_none());
    assert_eq!(g.value(y).data(), &[0.5]);
}

#[test]
fn activation_examples() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(t(&[3], &[-1.0, 2.0, -2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let l = g.leaky_relu(x, 0.2);
    assert!((g.value(l).data()[2] - -0.4).abs() < 1e-15);
    let z = g.constant(t(&[1], &[0.0]));
    let th = g.tanh(z);
    let sg = g.sigmoid(z);
    assert_eq!(g.value(th).item(), 0.0);
    assert_eq!(g.value(sg).item(), 0.5);
    let big = g.constant(t(&[2], &[-800.0, 800.0]));
    let sg = g.sigmoid(big);
    assert_eq!(g.value(sg).data(), &[0.0, 1.0]);
}

#[test]
fn bce_examples() {
    assert!((bce_mean(&[0.5], 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce_mean(&[1.0 - BCE_EPS], 1.0) < 1.1e-7);
    assert!((bce_mean(&[BCE_EPS], 1.0) - 16.118095650958317).abs() < 1e-9);
    assert!((bce_mean(&[0.0], 1.0) - bce_mean(&[BCE_EPS], 1.0)).abs() < 1e-12);
    assert!((bce_mean(&[0.2, 0.6], 0.0) - (-(0.8f64.ln()) - 0.4f64.ln()) / 2.0).abs() < 1e-12);
}

#[test]
fn gradcheck_square_and_sum() {
    let x = t(&[1], &[3.0]);
    let r = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!((r.analytic[0] - 6.0).abs() < 1e-15);
    assert!((r.numeric[0] - 6.0).abs() < 1e-9);
    assert!(r.max_rel_err < 1e-9);

    let x = t(&[4], &[0.3, -7.0, 2.0, 11.0]);
    let r = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
    assert_eq!(r.analytic, vec![1.0; 4]);
    assert!(r.max_rel_err < 1e-9);
}

fn loss_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Checks `Σ r ⊙ op(x)` with respect to `x`.
fn check_op<F>(shape: &[usize], seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph, Var) -> crate::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    grad_check(
        |g, v| {
            let y = op(g, v)?;
            let w = loss_weights(g.value(y).len(), seed);
            g.weighted_sum(y, &w)
        },
        &x,
        1e-5,
    )
    .unwrap()
    .max_rel_err
}

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let w = random(&[3, 2, 3, 2], &mut rng);
        let e = check_op(&[2, 2, 6, 5], seed, |g, x| {
            let w = g.constant(w.clone());
            g.conv2d(x, w, None, (2, 1), (1, 1), (1, 1))
        });
        assert!(e < 1e-4, "conv2d input: {e}");

        let input = random(&[2, 2, 6, 5], &mut rng);
        let e = check_op(&[3, 2, 3, 2], seed, |g, w| {
            let x = g.constant(input.clone());
            g.conv2d(x, w, None, (1, 1), (1, 1), (0, 0))
        });
        assert!(e < 1e-4, "conv2d kernel: {e}");

        let wv = random(&[3, 2, 3, 1], &mut rng);
        let e = check_op(&[2, 2, 9, 3], seed, |g, x| {
            let w = g.constant(wv.clone());
            g.conv2d(x, w, None, (1, 1), (2, 1), (2, 0))
        });
        assert!(e < 1e-4, "vertical conv input: {e}");

        let input = random(&[2, 2, 9, 3], &mut rng);
        let e = check_op(&[3, 2, 3, 1], seed, |g, w| {
            let x = g.constant(input.clone());
            g.conv2d(x, w, None, (1, 1), (2, 1), (1, 0))
        });
        assert!(e < 1e-4, "vertical conv kernel: {e}");

        let k = random(&[2, 2, 3], &mut rng);
        let e = check_op(&[2, 2, 20], seed, |g, x| {
            let k = g.constant(k.clone());
            g.conv1d(x, k, None, 1, 3, true)
        });
        assert!(e < 1e-4, "conv1d dilated: {e}");

        let e = check_op(&[3, 2, 4], seed, |g, x| {
            let gamma = g.constant(t(&[2], &[1.3, -0.4]));
            let beta = g.constant(t(&[2], &[0.1, 0.2]));
            Ok(g.batch_norm(x, gamma, beta, BnStats::Batch, 1e-3)?.0)
        });
        assert!(e < 1e-4, "batch norm: {e}");

        let e = check_op(&[2], seed, |g, gamma| {
            let x = g.constant(t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, -0.7, 1.1]));
            let beta = g.constant(t(&[2], &[0.0, 0.0]));
            Ok(g.batch_norm(x, gamma, beta, BnStats::Batch, 1e-3)?.0)
        });
        assert!(e < 1e-4, "batch norm gamma: {e}");

        let e = check_op(&[2, 3, 4], seed, |g, x| {
            let a = g.constant(t(&[3], &[0.25, -0.1, 0.6]));
            g.prelu(x, a)
        });
        assert!(e < 1e-4, "prelu: {e}");

        let e = check_op(&[3], seed, |g, a| {
            let x = g.constant(random(&[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(seed)));
            g.prelu(x, a)
        });
        assert!(e < 1e-4, "prelu slope: {e}");

        for (name, e) in [
            ("leaky", check_op(&[10], seed, |g, x| Ok(g.leaky_relu(x, 0.2)))),
            ("relu", check_op(&[10], seed, |g, x| Ok(g.relu(x)))),
            ("tanh", check_op(&[10], seed, |g, x| Ok(g.tanh(x)))),
            ("sigmoid", check_op(&[10], seed, |g, x| Ok(g.sigmoid(x)))),
        ] {
            assert!(e < 1e-4, "{name}: {e}");
        }

        let wd = random(&[4, 6], &mut rng);
        let e = check_op(&[3, 6], seed, |g, x| {
            let w = g.constant(wd.clone());
            let b = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
            g.linear(x, w, b)
        });
        assert!(e < 1e-4, "linear: {e}");

        let e = check_op(&[2, 2, 3, 2], seed, |g, x| g.upsample_nearest(x, (2, 3)));
        assert!(e < 1e-4, "upsample: {e}");

        let target = random(&[8], &mut rng);
        let e = check_op(&[8], seed, |g, x| {
            let y = g.constant(target.clone());
            g.mse(x, y)
        });
        assert!(e < 1e-4, "mse: {e}");

        let e = check_op(&[6], seed, |g, x| {
            let p = g.sigmoid(x);
            Ok(g.bce(p, 1.0))
        });
        assert!(e < 1e-4, "bce: {e}");
    }
}

#[test]
fn layer_suite_passes() {
    for seed in 0..3 {
        let checks = super::layer_suite(seed).unwrap();
        assert!(checks.len() >= 25);
        for c in &checks {
            assert!(c.passed(), "{}: {}", c.name, c.max_rel_err);
        }
    }
}

#[test]
fn mse_gradient_reaches_both_sides() {
    let mut g = Graph::new(Precision::F64);
    let a = g.leaf(t(&[2], &[0.0, 1.0]));
    let b = g.leaf(t(&[2], &[1.0, 1.0]));
    let l = g.mse(a, b).unwrap();
    assert_eq!(g.value(l).item(), 0.5);
    g.backward(l).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[-1.0, 0.0]);
    assert_eq!(g.grad(b).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn backward_needs_scalar_and_skips_constants() {
    let mut g = Graph::new(Precision::F64);
    let a = g.leaf(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let p = g.mul(a, c).unwrap();
    assert!(g.backward(p).is_err());
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
    let d = g.detach(p);
    let s2 = g.sum(d);
    g.backward(s2).unwrap();
    assert!(g.grad(a).is_none());
}

#[test]
fn reused_nodes_accumulate_gradients() {
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(t(&[1], &[2.0]));
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap();
    let s = g.sum(z);
    g.backward(s).unwrap();
    // z = 2x², dz/dx = 4x
    assert_eq!(g.grad(x).unwrap().data(), &[8.0]);
}

#[test]
fn ckp1_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[3, 1, 2], &mut rng).round_to_f32();
    let b = Tensor::new(&[2], vec![f32::MIN_POSITIVE as f64, -0.0]).unwrap();
    let bytes = encode_ckp1([("conv.weight", &a), ("ß", &b)]).unwrap();
    let back = decode_ckp1(&bytes).unwrap();
    assert_eq!(back[0].0, "conv.weight");
    assert_eq!(back[0].1, a);
    assert_eq!(back[1].1.data()[1].to_bits(), (-0.0f64).to_bits());
    let again = encode_ckp1(back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn param_set_load_validates() {
    let mut ps = ParamSet::new();
    ps.add("a", Tensor::zeros(&[2]), true);
    let good = vec![("a".to_string(), t(&[2], &[1.0, 2.0]))];
    ps.load_named(&good).unwrap();
    assert_eq!(ps.iter().next().unwrap().value.data(), &[1.0, 2.0]);
    assert!(ps.load_named(&[("a".into(), Tensor::zeros(&[3]))]).is_err());
    assert!(ps.load_named(&[("b".into(), Tensor::zeros(&[2]))]).is_err());
}
