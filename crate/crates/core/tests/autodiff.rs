//! Kernel oracles and finite-difference gradient checks for the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssod::tensor::{ConvSpec, Tape, Tensor};
use ssod::Error;

mod common;

use common::gradcheck::{cases, grad_check, rand_tensor};

/// Direct sliding-window cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, s: ConvSpec) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * s.padding - s.dilation * (kh - 1) - 1) / s.stride + 1;
    let wo = (wd + 2 * s.padding - s.dilation * (kw - 1) - 1) / s.stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.map(|b| b[oi]).unwrap_or(0.0);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * s.stride + ky * s.dilation) as i64 - s.padding as i64;
                                let ix = (xo * s.stride + kx * s.dilation) as i64 - s.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

/// Per-tap bilinear sampling written independently of the library kernel.
fn oracle_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - (y - y0)), (1.0, y - y0)] {
        for (dx, wx) in [(0.0, 1.0 - (x - x0)), (1.0, x - x0)] {
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                acc += wy * wx * plane[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

fn naive_deform(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    off: &Tensor<f64>,
    mask: &Tensor<f64>,
    s: ConvSpec,
) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (ho, wo) = (off.shape()[2], off.shape()[3]);
    let k = kh * kw;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b[oi];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let t = ky * kw + kx;
                            let at = |ch: usize| ((ni * 2 * k + ch) * ho + y) * wo + xo;
                            let py = (y * s.stride + ky * s.dilation) as f64 - s.padding as f64
                                + off.data()[at(2 * t)];
                            let px = (xo * s.stride + kx * s.dilation) as f64 - s.padding as f64
                                + off.data()[at(2 * t + 1)];
                            let m = mask.data()[((ni * k + t) * ho + y) * wo + xo];
                            for ci in 0..c {
                                let start = (ni * c + ci) * h * wd;
                                let v = oracle_bilinear(&x.data()[start..start + h * wd], h, wd, py, px);
                                acc += m * v * w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_center_is_nine() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.param(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, ConvSpec::new(1, 1, 1)).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[1, 1, 3, 3]);
    assert_eq!(v.data()[4], 9.0);
    assert_eq!(v.data()[0], 4.0);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input: Tensor<f32> = rand_tensor(&mut rng, &[2, 1, 4, 5], -1.0, 1.0);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(input.clone());
    let w = tape.param(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, w, None, ConvSpec::new(1, 0, 1)).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv_matches_sliding_window_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w: Tensor<f64> = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b: Tensor<f64> = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        for spec in [ConvSpec::new(1, 2, 2), ConvSpec::new(2, 1, 1), ConvSpec::new(1, 0, 2)] {
            let mut tape = Tape::<f64>::no_grad();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
            let expect = naive_conv(&x, &w, Some(b.data()), spec);
            for (a, e) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
            }
        }
    }
}

#[test]
fn conv_shape_mismatch_names_dimensions() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.param(Tensor::zeros(&[2, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, ConvSpec::new(1, 1, 1)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains('2'), "{msg}");
}

#[test]
fn deform_with_zero_offsets_equals_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..20 {
        let c = rng.gen_range(1..4);
        let o = rng.gen_range(1..4);
        let h = rng.gen_range(3..9);
        let w = rng.gen_range(3..9);
        let k = [1usize, 3][case % 2];
        let dil = rng.gen_range(1..3);
        let spec = if k == 1 {
            ConvSpec::new(rng.gen_range(1..3), 0, 1)
        } else {
            ConvSpec::new(rng.gen_range(1..3), dil, dil)
        };
        let x: Tensor<f32> = rand_tensor(&mut rng, &[2, c, h, w], -1.0, 1.0);
        let wt: Tensor<f32> = rand_tensor(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let b: Tensor<f32> = rand_tensor(&mut rng, &[o], -1.0, 1.0);
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.constant(x), tape.param(wt), tape.param(b));
        let conv = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
        let [n, _, ho, wo] = tape.value(conv).dims4("t").unwrap();
        let off = tape.constant(Tensor::zeros(&[n, 2 * k * k, ho, wo]));
        let mask = tape.constant(Tensor::full(&[n, k * k, ho, wo], 1.0));
        let dc = tape.deform_conv2d(xv, wv, Some(bv), off, mask, spec).unwrap();
        for (a, e) in tape.value(dc).data().iter().zip(tape.value(conv).data()) {
            assert!((a - e).abs() <= 1e-6, "case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn deform_unit_x_offset_shifts_one_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[1, 1, 5, 6], 0.0, 1.0);
    let mut tape = Tape::<f64>::no_grad();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let mut off = Tensor::zeros(&[1, 2, 5, 6]);
    for v in &mut off.data_mut()[30..] {
        *v = 1.0;
    }
    let off = tape.constant(off);
    let mask = tape.constant(Tensor::full(&[1, 1, 5, 6], 1.0));
    let y = tape.deform_conv2d(xv, w, None, off, mask, ConvSpec::new(1, 0, 1)).unwrap();
    let out = tape.value(y).data();
    for r in 0..5 {
        for c in 0..5 {
            assert_eq!(out[r * 6 + c], x.data()[r * 6 + c + 1]);
        }
        assert_eq!(out[r * 6 + 5], 0.0);
    }
}

#[test]
fn deform_matches_nested_loop_oracle() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let spec = [ConvSpec::new(1, 1, 1), ConvSpec::new(2, 2, 2), ConvSpec::new(1, 0, 1)][seed as usize % 3];
        let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 2, 6, 5], -1.0, 1.0);
        let w: Tensor<f64> = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b: Tensor<f64> = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let mut tape = Tape::<f64>::no_grad();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let probe = tape.conv2d(xv, wv, None, spec).unwrap();
        let [n, _, ho, wo] = tape.value(probe).dims4("t").unwrap();
        let off: Tensor<f64> = rand_tensor(&mut rng, &[n, 18, ho, wo], -2.5, 2.5);
        let mask: Tensor<f64> = rand_tensor(&mut rng, &[n, 9, ho, wo], 0.0, 1.0);
        let (ov, mv) = (tape.constant(off.clone()), tape.constant(mask.clone()));
        let y = tape.deform_conv2d(xv, wv, Some(bv), ov, mv, spec).unwrap();
        let expect = naive_deform(&x, &w, b.data(), &off, &mask, spec);
        for (a, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-5, "{a} vs {e}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_f64() {
    for seed in 0..4 {
        for case in cases::<f64>(seed) {
            let err = grad_check(&case.inputs, case.build.as_ref(), 1e-6);
            assert!(err <= 1e-6, "{} seed {seed}: rel err {err:e}", case.name);
        }
    }
}

#[test]
fn gradients_match_finite_differences_f32_twenty_seeds() {
    for seed in 0..20 {
        for case in cases::<f32>(seed) {
            let err = grad_check(&case.inputs, case.build.as_ref(), 1e-2);
            assert!(err <= 1e-3, "{} seed {seed}: rel err {err:e}", case.name);
        }
    }
}

#[test]
fn elementwise_fixtures() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);

    let c = tape.constant(Tensor::full(&[1, 2, 3, 3], 4.2));
    let g = tape.param(Tensor::full(&[2], 1.0));
    let b = tape.param(Tensor::zeros(&[2]));
    let n = tape.channel_norm(c, g, b, 1e-5).unwrap();
    assert!(tape.value(n).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_of_linear_form_gives_input() {
    let mut tape = Tape::<f64>::new();
    let xs = Tensor::new(vec![1, 1, 1, 3], vec![1.5, -2.0, 0.25]).unwrap();
    let w = tape.param(Tensor::new(vec![1, 1, 1, 3], vec![0.3, 0.1, -0.7]).unwrap());
    let x = tape.constant(xs.clone());
    let p = tape.mul(w, x).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &xs);
    assert!(tape.grad(x).is_none());
}

#[test]
fn constant_loss_gives_zero_grads() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::full(&[3], 2.0));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let p = tape.mul(w, zero).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::full(&[3], 2.0));
    assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));

    let mut other = Tape::<f32>::new();
    let o = other.param(Tensor::scalar(1.0));
    let mut fresh = Tape::<f32>::new();
    assert!(matches!(fresh.backward(o), Err(Error::DetachedTape { .. })));

    let mut ng = Tape::<f32>::no_grad();
    let p = ng.param(Tensor::scalar(1.0));
    assert!(matches!(ng.backward(p), Err(Error::NoGradTape)));
    assert_eq!(ng.grad_node_count(), 0);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f32> = rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
        let w: Tensor<f32> = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let off: Tensor<f32> = rand_tensor(&mut rng, &[1, 18, 8, 8], -1.0, 1.0);
        let m: Tensor<f32> = rand_tensor(&mut rng, &[1, 9, 8, 8], 0.0, 1.0);
        let mut t = Tape::<f32>::new();
        let v = [t.constant(x), t.param(w), t.constant(off), t.constant(m)];
        let y = t.deform_conv2d(v[0], v[1], None, v[2], v[3], ConvSpec::new(1, 1, 1)).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
