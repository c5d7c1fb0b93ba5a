//! Forward values of the tape ops against straight-line oracles.

use transhnet_core::rng::SeededRng;
use transhnet_core::tape::{Tape, PROB_CLAMP};
use transhnet_core::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), matmul_oracle(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2).as_slice());
    assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);

    let mut rng = SeededRng::new(3);
    let a = rng.normal_tensor(&[2, 3, 4], 1.0);
    let b = rng.normal_tensor(&[4, 5], 1.0);
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 3, 5]);
    assert_close(tape.value(c).data(), &matmul_oracle(a.data(), b.data(), 6, 4, 5), 1e-12);
}

#[test]
fn batch_matmul_matches_per_item_oracle() {
    let mut rng = SeededRng::new(4);
    let a = rng.normal_tensor(&[3, 2, 4], 1.0);
    let b = rng.normal_tensor(&[3, 4, 5], 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.batch_matmul(va, vb).unwrap();
    let mut expect = Vec::new();
    for i in 0..3 {
        expect.extend(matmul_oracle(&a.data()[i * 8..(i + 1) * 8], &b.data()[i * 20..(i + 1) * 20], 2, 4, 5));
    }
    assert_close(tape.value(c).data(), &expect, 1e-12);
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (b, ci, h, w) = x.dims4("x").unwrap();
    let (co, _, kh, kw) = k.dims4("k").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * ci + c) * h + iy as usize) * w + ix as usize];
                                s += xv * k.data()[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_sliding_window() {
    let mut rng = SeededRng::new(5);
    let x = rng.normal_tensor(&[2, 3, 5, 5], 1.0);
    let k = rng.normal_tensor(&[4, 3, 3, 3], 1.0);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
        let mut tape = Tape::new();
        let (vx, vk) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(vx, vk, stride, pad).unwrap();
        assert_close(tape.value(y).data(), &conv_oracle(&x, &k, stride, pad), 1e-12);
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut tape = Tape::new();
    let v = tape.constant(t(&[3], &[0.0, 2f64.ln(), 3f64.ln()]));
    let s = tape.softmax_lastdim(v);
    assert_close(tape.value(s).data(), &[1. / 6., 1. / 3., 0.5], 1e-15);

    let x = SeededRng::new(6).normal_tensor(&[4, 7], 3.0);
    let v = tape.constant(x.clone());
    let s = tape.softmax_lastdim(v);
    for (row, out) in x.data().chunks(7).zip(tape.value(s).data().chunks(7)) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
        assert_close(out, &expect, 1e-12);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gelu_matches_erf_form() {
    let mut tape = Tape::new();
    let grid: Vec<f64> = (0..81).map(|i| -8.0 + 0.2 * i as f64).collect();
    let v = tape.constant(t(&[81], &grid));
    let g = tape.gelu(v);
    let expect: Vec<f64> = grid.iter().map(|&x| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))).collect();
    assert_close(tape.value(g).data(), &expect, 1e-12);
    // Φ(1) and Φ(−1) to double precision
    let v = tape.constant(t(&[3], &[1.0, -1.0, 10.0]));
    let g = tape.gelu(v);
    assert_close(tape.value(g).data(), &[0.841_344_746_068_542_9, -0.158_655_253_931_457_05, 10.0], 1e-15);
}

#[test]
fn layer_norm_matches_two_pass() {
    let mut rng = SeededRng::new(7);
    let x = rng.normal_tensor(&[3, 4, 6], 2.0);
    let gamma = rng.normal_tensor(&[6], 1.0);
    let beta = rng.normal_tensor(&[6], 1.0);
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
    let mut expect = Vec::new();
    for row in x.data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (i, v) in row.iter().enumerate() {
            expect.push((v - mean) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i]);
        }
    }
    assert_close(tape.value(y).data(), &expect, 1e-10);
}

#[test]
fn batch_norm_matches_two_pass_and_reports_unbiased_variance() {
    let mut rng = SeededRng::new(8);
    let (b, c, h, w) = (2, 3, 2, 3);
    let x = rng.normal_tensor(&[b, c, h, w], 1.5);
    let gamma = rng.normal_tensor(&[c], 1.0);
    let beta = rng.normal_tensor(&[c], 1.0);
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let (y, stats) = tape.batch_norm_train(vx, vg, vb, 1e-5).unwrap();
    let at = |n: usize, ch: usize, i: usize| x.data()[(n * c + ch) * h * w + i];
    let count = (b * h * w) as f64;
    for ch in 0..c {
        let vals: Vec<f64> = (0..b).flat_map(|n| (0..h * w).map(move |i| (n, i))).map(|(n, i)| at(n, ch, i)).collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        assert!((stats.mean[ch] - mean).abs() < 1e-12);
        assert!((stats.var[ch] - var * count / (count - 1.0)).abs() < 1e-12);
        for n in 0..b {
            for i in 0..h * w {
                let expect = (at(n, ch, i) - mean) / (var + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
                let got = tape.value(y).data()[(n * c + ch) * h * w + i];
                assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
            }
        }
    }

    let (rm, rv) = ([0.5, -1.0, 2.0], [0.25, 4.0, 1.0]);
    let y = tape.batch_norm_eval(vx, vg, vb, &rm, &rv, 1e-5).unwrap();
    for (i, got) in tape.value(y).data().iter().enumerate() {
        let ch = i / (h * w) % c;
        let expect = (x.data()[i] - rm[ch]) / (rv[ch] + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
        assert!((got - expect).abs() < 1e-12);
    }
}

#[test]
fn bilinear_upsampling_matches_half_pixel_formula() {
    let x = SeededRng::new(9).normal_tensor(&[1, 2, 3, 4], 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let f = 4;
    let y = tape.upsample_bilinear(v, f).unwrap();
    let (h, w) = (3, 4);
    let sample = |plane: usize, sy: f64, sx: f64| {
        let clamp = |s: f64, n: usize| s.max(0.0).min((n - 1) as f64);
        let (sy, sx) = (clamp(sy, h), clamp(sx, w));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let p = |yy: usize, xx: usize| x.data()[(plane * h + yy) * w + xx];
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    };
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 2, 12, 16]);
    for plane in 0..2 {
        for oy in 0..12 {
            for ox in 0..16 {
                let sy = (oy as f64 + 0.5) / f as f64 - 0.5;
                let sx = (ox as f64 + 0.5) / f as f64 - 0.5;
                let got = out.data()[(plane * 12 + oy) * 16 + ox];
                assert!((got - sample(plane, sy, sx)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn nearest_upsampling_replicates_blocks() {
    let mut tape = Tape::new();
    let v = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let u = tape.upsample2x_nearest(v).unwrap();
    assert_eq!(
        tape.value(u).data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let c = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
    let u = tape.upsample2x_nearest(c).unwrap();
    assert_eq!(tape.value(u).shape(), &[1, 2, 6, 6]);
    assert!(tape.value(u).data().iter().all(|&v| v == 0.7));
}

#[test]
fn upsample_then_average_pool_is_exact_identity() {
    let x = SeededRng::new(10).normal_tensor(&[2, 3, 4, 5], 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let u = tape.upsample2x_nearest(v).unwrap();
    let p = tape.avg_pool2x2(u).unwrap();
    assert_eq!(tape.value(p), &x);
}

#[test]
fn patchify_matches_index_formula() {
    let x = SeededRng::new(11).normal_tensor(&[2, 3, 4, 6], 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = 2;
    let y = tape.patchify(v, p).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 6, 12]);
    for b in 0..2 {
        for gy in 0..2 {
            for gx in 0..3 {
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let tok = gy * 3 + gx;
                            let got = out.data()[(b * 6 + tok) * 12 + (c * p + py) * p + px];
                            let src = x.data()[((b * 3 + c) * 4 + gy * p + py) * 6 + gx * p + px];
                            assert_eq!(got, src);
                        }
                    }
                }
            }
        }
    }
    assert!(tape.patchify(v, 4).is_err());
}

#[test]
fn token_map_round_trips_and_concat_slices_back() {
    let x = SeededRng::new(12).normal_tensor(&[2, 6, 5], 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let m = tape.tokens_to_map(v, 2, 3).unwrap();
    assert_eq!(tape.value(m).shape(), &[2, 5, 2, 3]);
    let back = tape.map_to_tokens(m).unwrap();
    assert_eq!(tape.value(back), &x);

    let a = tape.constant(SeededRng::new(13).normal_tensor(&[2, 2, 3, 3], 1.0));
    let b = tape.constant(SeededRng::new(14).normal_tensor(&[2, 4, 3, 3], 1.0));
    let cat = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.value(cat).shape()[1], 6);
    let sa = tape.slice_channels(cat, 0, 2).unwrap();
    let sb = tape.slice_channels(cat, 2, 4).unwrap();
    assert_eq!(tape.value(sa), tape.value(a));
    assert_eq!(tape.value(sb), tape.value(b));
    let one = tape.concat_channels(&[a]).unwrap();
    assert_eq!(tape.value(one), tape.value(a));
    let bad = tape.constant(Tensor::zeros(&[2, 1, 2, 3]));
    assert!(tape.concat_channels(&[a, bad]).is_err());
}

fn loss_oracle(p: &[f64], y: &[f64], w: Option<&[f64]>) -> f64 {
    let (mut inter, mut union, mut bce, mut wsum) = (0.0, 0.0, 0.0, 0.0);
    for n in 0..p.len() {
        let wn = w.map_or(1.0, |w| w[n]);
        let pc = p[n].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if y[n] == 1.0 {
            inter += wn * p[n];
            union += wn;
            bce -= wn * pc.ln();
        } else {
            union += wn * p[n];
            bce -= wn * (1.0 - pc).ln();
        }
        wsum += wn;
    }
    (1.0 - inter / union) + bce / wsum
}

#[test]
fn seg_loss_golden_constant_half() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
    let l = tape.seg_loss(p, &t(&[1, 1, 2, 2], &[1., 1., 0., 0.]), None).unwrap();
    let v = tape.value(l).item().unwrap();
    assert!((v - (2.0 / 3.0 + 2f64.ln())).abs() < 1e-12);
    assert!((v - 1.359_814).abs() < 1e-6);
}

#[test]
fn seg_loss_matches_per_pixel_oracle_on_random_pairs() {
    let mut rng = SeededRng::new(15);
    for _ in 0..20 {
        let p = rng.uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0);
        let y = rng.uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0).map(|u| (u < 0.4) as u8 as f64);
        let w = rng.uniform_tensor(&[1, 1, 8, 8], 0.2, 3.0);
        let mut tape = Tape::new();
        let vp = tape.constant(p.clone());
        let l = tape.seg_loss(vp, &y, None).unwrap();
        let expect = loss_oracle(p.data(), y.data(), None);
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-10);
        let l = tape.seg_loss(vp, &y, Some(&w)).unwrap();
        let expect = loss_oracle(p.data(), y.data(), Some(w.data()));
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-10);
    }
}

#[test]
fn seg_loss_is_a_batch_mean() {
    let mut rng = SeededRng::new(16);
    let p = rng.uniform_tensor(&[3, 1, 4, 4], 0.0, 1.0);
    let y = rng.uniform_tensor(&[3, 1, 4, 4], 0.0, 1.0).map(|u| (u < 0.5) as u8 as f64);
    let mut tape = Tape::new();
    let vp = tape.constant(p.clone());
    let l = tape.seg_loss(vp, &y, None).unwrap();
    let expect: f64 = (0..3)
        .map(|b| loss_oracle(&p.data()[b * 16..(b + 1) * 16], &y.data()[b * 16..(b + 1) * 16], None))
        .sum::<f64>()
        / 3.0;
    assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-12);
}

#[test]
fn seg_loss_perfect_prediction_and_contract_errors() {
    let y = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
    let mut tape = Tape::new();
    let p = tape.constant(y.clone());
    let l = tape.seg_loss(p, &y, None).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-6);
    assert!(tape.seg_loss(p, &t(&[1, 1, 2, 2], &[1., 0.5, 0., 1.]), None).is_err());
    assert!(tape.seg_loss(p, &Tensor::zeros(&[1, 1, 4, 1]), None).is_err());
}

#[test]
fn forward_ops_are_pure() {
    let build = || {
        let mut rng = SeededRng::new(17);
        let x = rng.normal_tensor(&[1, 2, 4, 4], 1.0);
        let k = rng.normal_tensor(&[3, 2, 3, 3], 1.0);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.constant(x), tape.constant(k));
        let y = tape.conv2d(vx, vk, 1, 1).unwrap();
        let y = tape.gelu(y);
        let y = tape.map_to_tokens(y).unwrap();
        let y = tape.softmax_lastdim(y);
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1., -2., 0.5]));
    let a = tape.scale(x, 3.0);
    let b = tape.mul(x, x).unwrap();
    let s = tape.add(a, b).unwrap();
    let s = tape.add(s, x).unwrap();
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    // d/dx (3x + x² + x) = 4 + 2x
    assert_eq!(g.get(x).unwrap().data(), &[6., 0., 5.]);
}
