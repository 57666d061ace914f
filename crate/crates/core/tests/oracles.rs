//! Library operations against independent scalar references.

mod common;

use common::*;
use dkseg::attention::{block_specs, esa_block, lca_block, multi_head_attention, pyramid_pool};
use dkseg::autograd::Graph;
use dkseg::config::{norm_groups, LesionPooling};
use dkseg::data::downsample_gt;
use dkseg::dynamic_kernel::{extract_lesion_feature, predict, update_kernel, DynamicKernel, LesionDescriptor};
use dkseg::metrics::{compute_metrics, confusion_counts, evaluate_dataset};
use dkseg::model::{forward, init_params};
use dkseg::objective::{bce_loss, deep_supervision_loss, dice_loss, supervision_loss};
use dkseg::ops::LesionGate;
use dkseg::tensor::{resize_bilinear_registered, resize_nearest};
use dkseg::{ParamStore, Tensor};
use rand::Rng;

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= tol, "index {i}: {a} vs {b}");
    }
}

#[test]
fn conv2d_matches_sliding_window() {
    let mut r = rng(10);
    for &(cin, cout, h, w, k, stride, pad) in
        &[(2, 3, 6, 6, 3, 1, 1), (3, 4, 7, 5, 3, 2, 1), (1, 2, 4, 4, 1, 1, 0), (2, 2, 8, 8, 3, 2, 0)]
    {
        let x = uniform(&mut r, &[1, cin, h, w], 1.0);
        let wt = uniform(&mut r, &[cout, cin, k, k], 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let (want, oh, ow) = conv_oracle(x.data(), cin, h, w, wt.data(), cout, k, stride, pad);
        assert_eq!(g.shape(y), [1, cout, oh, ow]);
        assert_close(g.value(y).data(), &want, 1e-12);
    }
}

#[test]
fn dynamic_3x3_kernel_matches_sliding_window() {
    let mut r = rng(11);
    let x = uniform(&mut r, &[2, 64, 6, 6], 1.0);
    let k = uniform(&mut r, &[2, 64, 3, 3], 0.2);
    let mut g = Graph::new();
    let kernel = DynamicKernel { weights: g.constant(k.clone()), stage: 1 };
    let xv = g.constant(x.clone());
    let y = predict(&mut g, kernel, xv).unwrap();
    assert_eq!(g.shape(y), [2, 1, 6, 6]);
    for b in 0..2 {
        let xs = &x.data()[b * 64 * 36..(b + 1) * 64 * 36];
        let ks = &k.data()[b * 64 * 9..(b + 1) * 64 * 9];
        let (want, _, _) = conv_oracle(xs, 64, 6, 6, ks, 1, 3, 1, 1);
        assert_close(&g.value(y).data()[b * 36..(b + 1) * 36], &want, 1e-6);
    }
}

#[test]
fn unit_kernel_is_a_per_input_matrix_product() {
    let mut r = rng(12);
    let x = uniform(&mut r, &[3, 64, 4, 5], 1.0);
    let k = uniform(&mut r, &[3, 64, 1, 1], 1.0);
    let mut g = Graph::new();
    let kernel = DynamicKernel { weights: g.constant(k.clone()), stage: 2 };
    let xv = g.constant(x.clone());
    let y = predict(&mut g, kernel, xv).unwrap();
    for b in 0..3 {
        for pix in 0..20 {
            let want: f64 = (0..64).map(|c| k.data()[b * 64 + c] * x.data()[(b * 64 + c) * 20 + pix]).sum();
            assert!((g.value(y).data()[b * 20 + pix] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn group_norm_matches_direct_statistics() {
    let mut r = rng(13);
    let (c, h, w) = (8, 3, 5);
    let groups = norm_groups(c);
    let x = uniform(&mut r, &[2, c, h, w], 2.0);
    let gamma = uniform(&mut r, &[c], 1.0);
    let beta = uniform(&mut r, &[c], 1.0);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.group_norm(xv, gv, bv, groups).unwrap();
    let per = c / groups * h * w;
    for b in 0..2 {
        for grp in 0..groups {
            let start = (b * c + grp * c / groups) * h * w;
            let vals = &x.data()[start..start + per];
            let mean = vals.iter().sum::<f64>() / per as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            for (i, v) in vals.iter().enumerate() {
                let ch = grp * c / groups + i / (h * w);
                let want = (v - mean) / (var + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
                assert!((g.value(y).data()[start + i] - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn attention_small_case_and_row_sums() {
    let mut r = rng(14);
    let (n, s, c, heads) = (4, 3, 8, 2);
    let mut p = ParamStore::init(&block_specs("a", c), 3);
    randomize(&mut p, &mut r, 0.5);
    let q = uniform(&mut r, &[1, n, c], 1.0);
    let kv = uniform(&mut r, &[1, s, c], 1.0);
    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let y = multi_head_attention(&mut g, &p, "a", qv, kvv, kvv, heads).unwrap();
    let want = attention_oracle(&p, "a", q.data(), kv.data(), kv.data(), c, heads);
    assert_close(g.value(y).data(), &want, 1e-6);

    let w = dkseg::ops::attention_weights(&q, &kv, heads).unwrap();
    assert_eq!(w.shape(), [1, heads, n, s]);
    for row in w.data().chunks(s) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn pyramid_pool_on_10x10_and_8x8_quadrants() {
    let mut r = rng(15);
    let x = uniform(&mut r, &[1, 3, 10, 10], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = pyramid_pool(&mut g, xv).unwrap();
    assert_close(g.value(t).data(), &pyramid_oracle(x.data(), 3, 10, 10), 1e-6);

    let x = uniform(&mut r, &[1, 1, 8, 8], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = g.adaptive_avg_pool(xv, 2, 2).unwrap();
    for (qi, (qy, qx)) in [(0, 0), (0, 4), (4, 0), (4, 4)].into_iter().enumerate() {
        let mean = (0..4).flat_map(|y| (0..4).map(move |xx| (y, xx))).map(|(y, xx)| x.data()[(qy + y) * 8 + qx + xx]).sum::<f64>() / 16.0;
        assert!((g.value(p).data()[qi] - mean).abs() < 1e-12);
    }
}

fn feed_forward(p: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear_of(p, &format!("{prefix}.ff1"), x).into_iter().map(|v| v.max(0.0)).collect();
    let f = linear_of(p, &format!("{prefix}.ff2"), &h);
    x.iter().zip(f).map(|(a, b)| a + b).collect()
}

fn tokens(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    (0..n).flat_map(|i| (0..c).map(move |ch| x[ch * n + i])).collect()
}

#[test]
fn esa_block_is_pool_attention_and_feed_forward() {
    let mut r = rng(16);
    let (c, h, w, heads) = (8, 4, 6, 2);
    let mut p = ParamStore::init(&block_specs("esa3", c), 1);
    randomize(&mut p, &mut r, 0.4);
    let x = uniform(&mut r, &[1, c, h, w], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = esa_block(&mut g, &p, 3, xv, heads).unwrap();

    let n = h * w;
    let toks = tokens(x.data(), c, n);
    let pooled = pyramid_oracle(x.data(), c, h, w);
    let att = attention_oracle(&p, "esa3", &toks, &pooled, &pooled, c, heads);
    let mut want_tokens = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..c).map(|ch| toks[i * c + ch] + att[i * c + ch]).collect();
        want_tokens.extend(feed_forward(&p, "esa3", &row));
    }
    let got = g.value(y).data();
    for i in 0..n {
        for ch in 0..c {
            assert!((got[ch * n + i] - want_tokens[i * c + ch]).abs() < 1e-5);
        }
    }
}

#[test]
fn lca_block_matches_per_pixel_gate_formula() {
    for gate in [LesionGate::Sigmoid, LesionGate::Softmax] {
        let mut r = rng(17);
        let (c, h, w, heads) = (8, 4, 4, 2);
        let mut p = ParamStore::init(&block_specs("lca2", c), 2);
        randomize(&mut p, &mut r, 0.4);
        let x = uniform(&mut r, &[1, c, h, w], 1.0);
        let logits = uniform(&mut r, &[1, 1, h, w], 2.0);
        let mut g = Graph::new();
        let (xv, lv) = (g.constant(x.clone()), g.constant(logits.clone()));
        let y = lca_block(&mut g, &p, 2, xv, lv, heads, gate, LesionPooling::PixelMean).unwrap();

        let n = h * w;
        let t = lesion_oracle(x.data(), logits.data(), c, h, w, false, Pool::PixelMean);
        let k = linear_of(&p, "lca2.k", &t);
        let v = linear_of(&p, "lca2.v", &t);
        let d = c / heads;
        let toks = tokens(x.data(), c, n);
        let got = g.value(y).data();
        for i in 0..n {
            let row = &toks[i * c..(i + 1) * c];
            let q = linear_of(&p, "lca2.q", row);
            let mut att = vec![0.0; c];
            for hd in 0..heads {
                let dot: f64 = (hd * d..(hd + 1) * d).map(|j| q[j] * k[j]).sum::<f64>() / (d as f64).sqrt();
                let wgt = match gate {
                    LesionGate::Sigmoid => sigmoid(dot),
                    LesionGate::Softmax => 1.0,
                };
                for j in hd * d..(hd + 1) * d {
                    att[j] = wgt * v[j];
                }
            }
            let o = linear_of(&p, "lca2.o", &att);
            let res: Vec<f64> = row.iter().zip(o).map(|(a, b)| a + b).collect();
            let want = feed_forward(&p, "lca2", &res);
            for ch in 0..c {
                assert!((got[ch * n + i] - want[ch]).abs() < 1e-6, "{gate:?}");
            }
        }
    }
}

#[test]
fn lesion_feature_random_4x4() {
    let mut r = rng(18);
    let d = uniform(&mut r, &[1, 64, 4, 4], 1.0);
    let logits = uniform(&mut r, &[1, 1, 2, 2], 2.0);
    let mut g = Graph::new();
    let (dv, lv) = (g.constant(d.clone()), g.constant(logits.clone()));
    let f = extract_lesion_feature(&mut g, dv, lv, true, LesionPooling::Sum, 3).unwrap();
    assert_close(g.value(f.values).data(), &lesion_oracle(d.data(), logits.data(), 64, 4, 4, true, Pool::Sum), 1e-6);
}

#[test]
fn kernel_update_scalar_toy_through_64_channels() {
    // Identity φ's turn every channel into an independent copy of the toy.
    let mut p = ParamStore::init(&dkseg::dynamic_kernel::param_specs(4), 0);
    for i in 1..=6 {
        let w = p.get_mut(&format!("dk.phi{i}.weight")).unwrap();
        *w = Tensor::from_fn(&[64, 64], |j| (j / 64 == j % 64) as u8 as f64);
        p.get_mut(&format!("dk.phi{i}.bias")).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let prev = DynamicKernel { weights: g.constant(Tensor::full(&[1, 64, 1, 1], 2.0)), stage: 3 };
    let lesion = LesionDescriptor { values: g.constant(Tensor::full(&[1, 64], 1.0)), stage: 3 };
    let (k, gates) = update_kernel(&mut g, &p, prev, lesion).unwrap();
    let s2 = sigmoid(2.0);
    assert!(g.value(gates.feature).data().iter().all(|v| (v - s2).abs() < 1e-12));
    assert!(g.value(k.weights).data().iter().all(|v| (v - 3.0 * s2).abs() < 1e-12));
    assert!((3.0 * s2 - 2.6424).abs() < 1e-4);
}

#[test]
fn bce_and_dice_match_direct_formulas() {
    let mut r = rng(19);
    let logits = uniform(&mut r, &[1, 1, 3, 3], 3.0);
    let gt = Tensor::from_fn(&[1, 1, 3, 3], |i| (i % 2) as f64);
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let bce = bce_loss(&mut g, lv, &gt).unwrap();
    let dice = dice_loss(&mut g, lv, &gt, 1.0).unwrap();
    let pr: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
    let want_bce = pr.iter().zip(gt.data()).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 9.0;
    let inter: f64 = pr.iter().zip(gt.data()).map(|(p, y)| p * y).sum();
    let want_dice = 1.0 - (2.0 * inter + 1.0) / (pr.iter().sum::<f64>() + gt.sum() + 1.0);
    assert!((g.value(bce).item() - want_bce).abs() < 1e-9);
    assert!((g.value(dice).item() - want_dice).abs() < 1e-9);
}

#[test]
fn deep_supervision_is_the_sum_of_stage_losses() {
    let cfg = tiny_model();
    let p = init_params(&cfg);
    let (images, masks) = blob_batch(2, 32, 32, 20);
    let mut g = Graph::new();
    let x = g.constant(images);
    let trace = forward(&mut g, &p, &cfg, x).unwrap();
    let total = deep_supervision_loss(&mut g, &trace, &masks, 1.0).unwrap();
    let total = g.value(total).item();

    let mut separate = Vec::new();
    for s in 1..=5 {
        let v = supervision_loss(&mut g, &trace, &masks, 1.0, &[s]).unwrap();
        separate.push(g.value(v).item());
    }
    assert!((separate.iter().sum::<f64>() - total).abs() < 1e-9);
    let reversed = supervision_loss(&mut g, &trace, &masks, 1.0, &[5, 4, 3, 2, 1]).unwrap();
    assert!((g.value(reversed).item() - total).abs() < 1e-9);

    let p1 = trace.prediction(1);
    let (h, w) = (g.shape(p1)[2], g.shape(p1)[3]);
    let gt1 = Tensor::stack(&[downsample_gt(&masks.index0(0), h, w), downsample_gt(&masks.index0(1), h, w)]).unwrap();
    let b = bce_loss(&mut g, p1, &gt1).unwrap();
    let d = dice_loss(&mut g, p1, &gt1, 1.0).unwrap();
    assert_eq!(separate[0], g.value(b).item() + g.value(d).item());
}

#[test]
fn nearest_downsample_follows_index_rule() {
    let checker = Tensor::from_fn(&[1, 8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
    let down = downsample_gt(&checker, 4, 4);
    for oy in 0..4 {
        for ox in 0..4 {
            assert_eq!(down.data()[oy * 4 + ox], checker.data()[(oy * 8 / 4) * 8 + ox * 8 / 4]);
        }
    }
    let up = resize_nearest(&down, 8, 8);
    assert_eq!(up.shape(), [1, 8, 8]);
}

#[test]
fn registered_upsampling_restores_sampled_pixels() {
    let mut r = rng(21);
    let fine = uniform(&mut r, &[1, 8, 12], 1.0);
    let coarse = resize_nearest(&fine, 4, 6);
    let up = resize_bilinear_registered(&coarse, 8, 12);
    for y in (0..8).step_by(2) {
        for x in (0..12).step_by(2) {
            assert!((up.data()[y * 12 + x] - fine.data()[y * 12 + x]).abs() < 1e-12);
        }
    }
}

#[test]
fn counts_on_random_4x4_and_dataset_mean() {
    let mut r = rng(22);
    let pred: Vec<bool> = (0..16).map(|_| r.gen_bool(0.5)).collect();
    let gt: Vec<bool> = (0..16).map(|_| r.gen_bool(0.5)).collect();
    let t = |m: &[bool]| Tensor::new(&[1, 4, 4], m.iter().map(|&b| b as u8 as f64).collect()).unwrap();
    assert_eq!(confusion_counts(&t(&pred), &t(&gt)).unwrap(), counts_oracle(&pred, &gt));

    let cfg = tiny_model();
    let p = init_params(&cfg);
    let samples = dkseg::data::synth_generate(5, (32, 32), 3).unwrap();
    let report = evaluate_dataset(&p, &cfg, &samples, 0.5, 2).unwrap();
    let mut sum = [0.0; 8];
    for (s, row) in samples.iter().zip(&report.per_image) {
        let prob = dkseg::model::predict_probabilities(&p, &cfg, &Tensor::stack(std::slice::from_ref(&s.image)).unwrap()).unwrap();
        let bin: Vec<bool> = prob.data().iter().map(|&v| v >= 0.5).collect();
        let gtb: Vec<bool> = s.mask.data().iter().map(|&v| v > 0.5).collect();
        let c = counts_oracle(&bin, &gtb);
        assert_eq!(row.counts, c);
        for (acc, v) in sum.iter_mut().zip(compute_metrics(&c).values()) {
            *acc += v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / samples.len() as f64).collect();
    assert_eq!(report.aggregate.values().to_vec(), mean);
}
