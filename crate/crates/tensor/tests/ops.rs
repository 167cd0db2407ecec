use mafea_tensor::{grad_check, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

// ---- naive oracles ---------------------------------------------------------

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    out
}

fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.get(&[co, ci, ky, kx]) * x.get(&[ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

fn bilinear_oracle(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, h * f, w * f]);
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = (o as f64 + 0.5) / f as f64 - 0.5;
        let s = s.max(0.0).min((n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    for ch in 0..c {
        for oy in 0..h * f {
            let (y0, y1, ty) = coord(oy, h);
            for ox in 0..w * f {
                let (x0, x1, tx) = coord(ox, w);
                let v = (1.0 - ty) * (1.0 - tx) * x.get(&[ch, y0, x0])
                    + (1.0 - ty) * tx * x.get(&[ch, y0, x1])
                    + ty * (1.0 - tx) * x.get(&[ch, y1, x0])
                    + ty * tx * x.get(&[ch, y1, x1]);
                out.set(&[ch, oy, ox], v);
            }
        }
    }
    out
}

// ---- matmul ----------------------------------------------------------------

#[test]
fn matmul_identity_and_analytic() {
    let mut tape = Tape::new();
    let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
    let i2 = tape.constant(Tensor::eye(2));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i2, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[1., 1.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::randn(&[5, 7], 1.0, &mut r);
    let b = Tensor::randn(&[7, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    assert!(tape.value(c).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

// ---- softmax -----------------------------------------------------------------

fn softmax_of(data: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[data.len()], data));
    let y = tape.softmax(x, 0).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[1.0, 1.0]), vec![0.5, 0.5]);
    let y = softmax_of(&[0.0, 3f64.ln()]);
    assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
    assert_eq!(softmax_of(&[1000.0, 1000.0]), vec![0.5, 0.5]);
}

#[test]
fn softmax_along_first_axis_of_matrix() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    assert!(tape.softmax(x, 2).is_err());
}

// ---- layer norm --------------------------------------------------------------

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::full(&[1, 4], 3.7));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let gamma = Tensor::randn(&[6], 1.0, &mut r);
    let beta = Tensor::randn(&[6], 1.0, &mut r);
    let w = Tensor::randn(&[3, 6], 1.0, &mut r);
    let x = Tensor::randn(&[3, 6], 1.0, &mut r);
    let check = grad_check(
        |tape, x| {
            let g = tape.constant(gamma.clone());
            let b = tape.constant(beta.clone());
            let wv = tape.constant(w.clone());
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            let y = tape.mul(y, wv)?;
            tape.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "{check:?}");
}

// ---- conv2d ------------------------------------------------------------------

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut r = rng(3);
    let x = Tensor::randn(&[1, 5, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_box_filter_on_constant_map() {
    let v = 1.75;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 6, 6], v));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let out = tape.value(y);
    for i in 1..5 {
        for j in 1..5 {
            assert!((out.get(&[0, i, j]) - 9.0 * v).abs() < 1e-12);
        }
    }
    assert!((out.get(&[0, 0, 0]) - 4.0 * v).abs() < 1e-12);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(4);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 2, 5), (3, 0, 1)] {
        let x = Tensor::randn(&[3, 7, 7], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, k, k], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, stride, pad);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn conv2d_rejects_non_integral_extent_and_even_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 6, 6]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.conv2d(x, w, None, 2, 0).is_err());
    let w2 = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(tape.conv2d(x, w2, None, 1, 0).is_err());
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(5);
    let x = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let probe = Tensor::randn(&[3, 3, 3], 1.0, &mut r);
    let wrt_x = grad_check(
        |tape, xv| {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let pv = tape.constant(probe.clone());
            let y = tape.conv2d(xv, wv, Some(bv), 2, 1)?;
            let y = tape.mul(y, pv)?;
            tape.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(wrt_x.max_rel_err < 1e-6, "{wrt_x:?}");
    let wrt_w = grad_check(
        |tape, wv| {
            let xv = tape.constant(x.clone());
            let bv = tape.constant(b.clone());
            let pv = tape.constant(probe.clone());
            let y = tape.conv2d(xv, wv, Some(bv), 2, 1)?;
            let y = tape.mul(y, pv)?;
            tape.sum(y)
        },
        &w,
        1e-6,
    )
    .unwrap();
    assert!(wrt_w.max_rel_err < 1e-6, "{wrt_w:?}");
    let wrt_b = grad_check(
        |tape, bv| {
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let pv = tape.constant(probe.clone());
            let y = tape.conv2d(xv, wv, Some(bv), 2, 1)?;
            let y = tape.mul(y, pv)?;
            tape.sum(y)
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert!(wrt_b.max_rel_err < 1e-6, "{wrt_b:?}");
}

// ---- bilinear upsampling -----------------------------------------------------

#[test]
fn upsample_factor_one_is_identity() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.upsample_bilinear(xv, 1).unwrap();
    assert_eq!(tape.value(y), &x);
    assert!(tape.upsample_bilinear(xv, 0).is_err());
}

#[test]
fn upsample_constant_map_scales_mass() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 3, 5], 0.3));
    let y = tape.upsample_bilinear(x, 2).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 6, 10]);
    assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    assert!((out.sum() - 4.0 * 0.3 * 15.0).abs() < 1e-12);
}

#[test]
fn upsample_ramp_matches_interpolation_formula() {
    let x = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.upsample_bilinear(xv, 2).unwrap();
    let want = bilinear_oracle(&x, 2);
    assert!(tape.value(y).max_abs_diff(&want) < 1e-15);
    // interior sample at output (1, 1) sits at source (0.25, 0.25)
    assert!((tape.value(y).get(&[0, 1, 1]) - 0.75).abs() < 1e-15);

    let mut r = rng(7);
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let xv = tape.constant(x.clone());
    let y = tape.upsample_bilinear(xv, 3).unwrap();
    assert!(tape.value(y).max_abs_diff(&bilinear_oracle(&x, 3)) < 1e-12);
}

// ---- backward ----------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &Tensor::ones(&[2, 3]));
}

#[test]
fn backward_of_half_square_is_identity() {
    let x0 = t(&[4], &[1.5, -2.0, 0.25, 3.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(half).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &x0);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
    tape.reset();
    assert!(tape.is_empty());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    let c = tape.constant(Tensor::full(&[2], 2.0));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 1e300));
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut r = rng(8);
    let x = Tensor::randn(&[7], 1.0, &mut r);
    let c = grad_check(|tape, x| tape.sum(x), &x, 1e-3).unwrap();
    assert!(c.max_rel_err < 1e-10, "{c:?}");
}

#[test]
fn grad_check_of_softmax_then_pick() {
    let mut r = rng(9);
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let c = grad_check(
        |tape, x| {
            let y = tape.softmax(x, 1)?;
            let col = tape.slice_cols(y, 2, 1)?;
            let row = tape.slice_rows(col, 1, 1)?;
            tape.sum(row)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(c.max_rel_err < 1e-6, "{c:?}");
}

#[test]
fn max_n_routes_gradient_to_first_winner() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[3], &[1.0, 5.0, 2.0]));
    let b = tape.leaf(t(&[3], &[1.0, 4.0, 3.0]));
    let m = tape.max_n(&[a, b]).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 5.0, 3.0]);
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[1.0, 1.0, 0.0]);
    assert_eq!(g.wrt(b).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn adaptive_pool_of_ramp_matches_quadrant_means() {
    let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.adaptive_avg_pool2d(xv, 2, 2).unwrap();
    let mean = |r0: usize, c0: usize| -> f64 {
        let mut s = 0.0;
        for r in r0..r0 + 2 {
            for c in c0..c0 + 2 {
                s += x.get(&[0, r, c]);
            }
        }
        s / 4.0
    };
    let want = [mean(0, 0), mean(0, 2), mean(2, 0), mean(2, 2)];
    assert_eq!(tape.value(y).data(), &want);
}

// ---- randomized gradient properties -------------------------------------------

/// One differentiable op applied to a random input, reduced against a random
/// probe so every output coordinate contributes.
fn op_case(op: usize, x: &Tensor, seed: u64) -> f64 {
    let mut r = rng(seed);
    let aux = Tensor::randn(&[4, 4], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    let kernel = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut r);
    let dw = Tensor::randn(&[1, 3, 3], 1.0, &mut r);
    let f = |tape: &mut Tape, xv| -> mafea_tensor::Result<_> {
        let y = match op {
            0 => {
                let a = tape.constant(aux.clone());
                tape.matmul(xv, a)?
            }
            1 => tape.softmax(xv, 1)?,
            2 => tape.softmax(xv, 0)?,
            3 => {
                let g = tape.constant(bias.clone());
                let b = tape.constant(bias.map(|v| -v));
                tape.layer_norm(xv, g, b, 1e-5)?
            }
            4 => tape.gelu(xv)?,
            5 => {
                let b = tape.constant(bias.clone());
                tape.add_bias(xv, b)?
            }
            6 => {
                let x3 = tape.reshape(xv, &[1, 4, 4])?;
                let k = tape.constant(kernel.clone());
                tape.conv2d(x3, k, None, 1, 1)?
            }
            7 => {
                let x3 = tape.reshape(xv, &[1, 4, 4])?;
                tape.upsample_bilinear(x3, 2)?
            }
            8 => {
                let x3 = tape.reshape(xv, &[1, 4, 4])?;
                let k = tape.constant(dw.clone());
                tape.depthwise_conv2d(x3, k)?
            }
            9 => {
                let x3 = tape.reshape(xv, &[1, 4, 4])?;
                tape.adaptive_avg_pool2d(x3, 3, 3)?
            }
            10 => {
                let s = tape.softmax(xv, 1)?;
                let l = tape.affine(s, -1.0, 1.0)?;
                tape.log_clamped(l, 1e-12, 1.0 - 1e-12)?
            }
            11 => {
                let tr = tape.transpose(xv)?;
                let a = tape.slice_cols(tr, 1, 2)?;
                let a = tape.slice_rows(a, 1, 3)?;
                let b = tape.slice_rows(xv, 0, 3)?;
                let b = tape.slice_cols(b, 0, 3)?;
                let c = tape.concat_cols(&[a, b])?;
                let r2 = tape.repeat_rows(c, 2)?;
                tape.concat_rows(&[r2, c])?
            }
            12 => tape.softplus(xv)?,
            _ => {
                let a = tape.constant(aux.clone());
                let m = tape.mul(xv, a)?;
                tape.sub(m, xv)?
            }
        };
        let n = tape.value(y).numel();
        let probe = Tensor::from_fn(tape.value(y).shape(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
        debug_assert_eq!(probe.numel(), n);
        let p = tape.constant(probe);
        let z = tape.mul(y, p)?;
        tape.sum(z)
    };
    grad_check(f, x, 1e-6).unwrap().max_rel_err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_op_backward_matches_central_differences(op in 0usize..14, seed in 0u64..1000) {
        let mut r = rng(seed.wrapping_add(17));
        let x = Tensor::randn(&[4, 4], 1.0, &mut r);
        let err = op_case(op, &x, seed);
        prop_assert!(err < 1e-5, "op {} rel err {}", op, err);
    }

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(
        rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in 0u64..1000
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[rows, cols], scale, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v > 0.0 || scale > 20.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_and_conv_match_oracles_on_random_shapes(
        m in 1usize..=8, k in 1usize..=8, n in 1usize..=8,
        cin in 1usize..=3, hw in 3usize..=8, seed in 0u64..1000
    ) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let x = Tensor::randn(&[cin, hw, hw], 1.0, &mut r);
        let w = Tensor::randn(&[2, cin, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        prop_assert!(tape.value(c).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-10);
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&conv_oracle(&x, &w, 1, 1)) < 1e-10);
    }

    #[test]
    fn forward_outputs_stay_finite(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[3, 4], scale, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let ops = [
            tape.softmax(xv, 1).unwrap(),
            tape.layer_norm(xv, g, b, 1e-5).unwrap(),
            tape.gelu(xv).unwrap(),
            tape.leaky_relu(xv, 0.01).unwrap(),
            tape.softplus(xv).unwrap(),
            tape.log_clamped(xv, 1e-12, 1.0).unwrap(),
        ];
        for v in ops {
            prop_assert!(tape.value(v).all_finite());
        }
    }

    #[test]
    fn record_round_trip_is_lossless(
        shape in proptest::collection::vec(1usize..5, 0..4), seed in 0u64..1000
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&shape, 3.0, &mut r);
        let mut buf = Vec::new();
        mafea_tensor::io::write_tensor(&mut buf, &x).unwrap();
        let back = mafea_tensor::io::read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mtnsr");
    let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
    mafea_tensor::io::save_tensor(&path, &x).unwrap();
    assert_eq!(mafea_tensor::io::load_tensor(&path).unwrap(), x);
}
