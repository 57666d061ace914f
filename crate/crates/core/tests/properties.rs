//! Property-based invariants.

mod common;

use common::*;
use dkseg::autograd::Graph;
use dkseg::config::{LesionPooling, TrainConfig};
use dkseg::data::{apply_augment, split, split_sizes, AugmentParams, Sample, SplitSpec};
use dkseg::dynamic_kernel::{self, extract_lesion_feature, generate_kernel, update_kernel, DynamicKernel, LesionDescriptor};
use dkseg::metrics::{compute_metrics, confusion_counts, ConfusionCounts};
use dkseg::model::{encode, init_params};
use dkseg::objective::{bce_loss, dice_loss, poly_lr};
use dkseg::ops::{attention_weights, lesion_gate_weights, LesionGate};
use dkseg::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor {
    Tensor::new(shape, values).unwrap()
}

fn values(n: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Beyond |x| ≈ 36.7 the logistic function rounds to exactly 0 or 1 in
    // f64, so inputs are bounded to keep the open interval representable.
    #[test]
    fn update_gates_stay_in_open_unit_interval(
        f in values(64, 5.0),
        k in values(64 * 4, 5.0),
        seed in 0u64..1000,
    ) {
        let p = ParamStore::init(&dynamic_kernel::param_specs(8), seed);
        let mut g = Graph::new();
        let prev = DynamicKernel { weights: g.constant(tensor(&[1, 64, 2, 2], k)), stage: 2 };
        let lesion = LesionDescriptor { values: g.constant(tensor(&[1, 64], f)), stage: 2 };
        let (_, gates) = update_kernel(&mut g, &p, prev, lesion).unwrap();
        for v in g.value(gates.feature).data().iter().chain(g.value(gates.kernel).data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn lesion_feature_is_linear_in_features(
        d1 in values(4 * 16, 2.0),
        d2 in values(4 * 16, 2.0),
        logits in values(4, 4.0),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        pixel_mean in any::<bool>(),
    ) {
        let pooling = if pixel_mean { LesionPooling::PixelMean } else { LesionPooling::Sum };
        let run = |d: Vec<f64>| {
            let mut g = Graph::new();
            let dv = g.constant(tensor(&[1, 4, 4, 4], d));
            let lv = g.constant(tensor(&[1, 1, 2, 2], logits.clone()));
            let f = extract_lesion_feature(&mut g, dv, lv, true, pooling, 2).unwrap();
            g.value(f.values).data().to_vec()
        };
        let mixed: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        let (f1, f2, fm) = (run(d1), run(d2), run(mixed));
        for i in 0..4 {
            prop_assert!((fm[i] - (a * f1[i] + b * f2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn lesion_feature_is_monotone_in_probability(
        d in prop::collection::vec(0.0f64..2.0, 3 * 9),
        logits in values(9, 4.0),
        which in 0usize..9,
        bump in 0.0f64..3.0,
        pixel_mean in any::<bool>(),
    ) {
        let pooling = if pixel_mean { LesionPooling::PixelMean } else { LesionPooling::Sum };
        let run = |l: Vec<f64>| {
            let mut g = Graph::new();
            let dv = g.constant(tensor(&[1, 3, 3, 3], d.clone()));
            let lv = g.constant(tensor(&[1, 1, 3, 3], l));
            let f = extract_lesion_feature(&mut g, dv, lv, false, pooling, 2).unwrap();
            g.value(f.values).data().to_vec()
        };
        let mut raised = logits.clone();
        raised[which] += bump;
        let (lo, hi) = (run(logits), run(raised));
        for c in 0..3 {
            prop_assert!(hi[c] >= lo[c]);
        }
    }

    #[test]
    fn lesion_gate_never_decreases_with_alignment(
        q in values(8, 2.0),
        k in values(8, 2.0),
        alpha in 0.0f64..2.0,
    ) {
        let qt = tensor(&[1, 1, 8], q.clone());
        let kt = tensor(&[1, 1, 8], k.clone());
        let moved: Vec<f64> = q.iter().zip(&k).map(|(a, b)| a + alpha * b).collect();
        let before = lesion_gate_weights(&qt, &kt, 2, LesionGate::Sigmoid);
        let after = lesion_gate_weights(&tensor(&[1, 1, 8], moved), &kt, 2, LesionGate::Sigmoid);
        for (a, b) in before.data().iter().zip(after.data()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(q in values(5 * 8, 3.0), k in values(7 * 8, 3.0), heads in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let w = attention_weights(&tensor(&[1, 5, 8], q), &tensor(&[1, 7, 8], k), heads).unwrap();
        for row in w.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dice_iou_identity_and_label_swap(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let m = compute_metrics(&c);
        if tp + fp + fn_ > 0 {
            prop_assert!((m.dice - 2.0 * m.iou_polyp / (1.0 + m.iou_polyp)).abs() <= 1e-12);
        }
        let s = compute_metrics(&c.swapped());
        prop_assert_eq!(s.recall, m.specificity);
        prop_assert_eq!(s.specificity, m.recall);
        prop_assert_eq!(s.iou_polyp, m.iou_background);
        prop_assert_eq!(s.iou_background, m.iou_polyp);
        prop_assert!((s.mean_iou - m.mean_iou).abs() < 1e-15);
        prop_assert_eq!(s.accuracy, m.accuracy);
        for v in m.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_pixel_order(pred in prop::collection::vec(any::<bool>(), 36), gt in prop::collection::vec(any::<bool>(), 36), seed in any::<u64>()) {
        let t = |m: &[bool]| tensor(&[1, 6, 6], m.iter().map(|&b| b as u8 as f64).collect());
        let mut order: Vec<usize> = (0..36).collect();
        order.shuffle(&mut rng(seed));
        let pp: Vec<bool> = order.iter().map(|&i| pred[i]).collect();
        let gp: Vec<bool> = order.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(confusion_counts(&t(&pred), &t(&gt)).unwrap(), confusion_counts(&t(&pp), &t(&gp)).unwrap());
    }

    #[test]
    fn losses_are_non_negative(logits in values(2 * 9, 20.0), gt in prop::collection::vec(any::<bool>(), 18)) {
        let gt = tensor(&[2, 1, 3, 3], gt.iter().map(|&b| b as u8 as f64).collect());
        let mut g = Graph::new();
        let l = g.constant(tensor(&[2, 1, 3, 3], logits));
        let b = bce_loss(&mut g, l, &gt).unwrap();
        let d = dice_loss(&mut g, l, &gt, 1.0).unwrap();
        prop_assert!(g.value(b).item() >= 0.0);
        prop_assert!(g.value(d).item() >= 0.0);
    }

    #[test]
    fn poly_schedule_is_strictly_decreasing(epochs in 2usize..200, power in 0.1f64..1.0, lr in 1e-5f64..1.0) {
        let cfg = TrainConfig { epochs, power, lr_init: lr, ..TrainConfig::default() };
        prop_assert_eq!(poly_lr(0, &cfg).unwrap(), lr);
        for e in 1..epochs {
            let (a, b) = (poly_lr(e - 1, &cfg).unwrap(), poly_lr(e, &cfg).unwrap());
            prop_assert!(b < a && b > 0.0);
        }
        prop_assert!(poly_lr(epochs, &cfg).is_err());
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded(
        n in 3usize..60,
        ratios in prop::sample::select(vec![(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (1.0, 0.0, 0.0), (0.5, 0.5, 0.0)]),
        seed in any::<u64>(),
    ) {
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample { image: Tensor::zeros(&[3, 1, 1]), mask: Tensor::zeros(&[1, 1, 1]), id: format!("s{i}") })
            .collect();
        let spec = SplitSpec::new(ratios.0, ratios.1, ratios.2, seed).unwrap();
        let a = split(&samples, &spec).unwrap();
        let b = split(&samples, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        let mut ids: Vec<&str> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        let sizes = split_sizes(n, &spec).unwrap();
        prop_assert_eq!((a.train.len(), a.val.len(), a.test.len()), sizes);
    }

    #[test]
    fn augmentation_keeps_value_ranges(
        hflip in any::<bool>(),
        vflip in any::<bool>(),
        angle in -15.0f64..15.0,
        area in 0.9f64..1.0,
        oy in 0.0f64..1.0,
        ox in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let s = &dkseg::data::synth_generate(1, (32, 32), seed).unwrap()[0];
        let p = AugmentParams { hflip, vflip, angle, crop_scale: area.sqrt(), crop_offset: (oy, ox) };
        let out = apply_augment(s, &p);
        prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn standard_split_protocols() {
    let s = |a, b, c| split_sizes(10, &SplitSpec::new(a, b, c, 0).unwrap()).unwrap();
    assert_eq!(s(0.8, 0.1, 0.1), (8, 1, 1));
    assert_eq!(s(0.6, 0.2, 0.2), (6, 2, 2));
}

#[test]
fn different_inputs_give_different_initial_kernels() {
    let cfg = tiny_model();
    let p = init_params(&cfg);
    for seed in 0..5 {
        let (a, _) = blob_batch(1, 32, 32, 100 + seed);
        let (b, _) = blob_batch(1, 32, 32, 200 + seed);
        let kernel = |img: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(img);
            let e = encode(&mut g, &p, &cfg, x).unwrap();
            let k = generate_kernel(&mut g, &p, e[4].values, 1).unwrap();
            g.value(k.weights).clone()
        };
        assert_ne!(kernel(a), kernel(b));
    }
}
