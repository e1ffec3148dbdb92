use std::collections::BTreeMap;

use gsc::autodiff::{softmax_channels, Tape, Tensor};
use gsc::losses::{gradient_measurement, sc_loss, stat_group, step_aware_weights, GradientStats, StatGroup, StatsMode};
use gsc::metrics::ConfusionMatrix;
use gsc::relabel::{correction_weights, plain_relabel, relabel, EntropyThresholds, LabelAudit, PrototypeTable};
use gsc::scenario::{ScenarioSpec, Setting, CLASS_ORDER_PRESETS};
use gsc::segnet::{decode_checkpoint, encode_checkpoint, Architecture, SegNetwork};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random relabeling problem: one image of `k` old channels plus new ones.
struct Fixture {
    gt: Vec<usize>,
    gt_full: Vec<usize>,
    probs: Tensor<f64>,
    features: Tensor<f64>,
    prototypes: PrototypeTable,
    thresholds: EntropyThresholds,
    k: usize,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=5);
    let (h, w, f) = (
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=3),
    );
    let px = h * w;
    let logits = Tensor::from_fn(&[1, k, h, w], |_| rng.random_range(-3.0..3.0));
    let probs = softmax_channels(&logits).unwrap();
    let features = Tensor::from_fn(&[1, f, h, w], |_| rng.random_range(-1.0..1.0));
    let mut prototypes = BTreeMap::new();
    let mut tau = BTreeMap::new();
    for c in 0..k {
        if rng.random_bool(0.8) {
            prototypes.insert(c, (0..f).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        if rng.random_bool(0.9) {
            tau.insert(c, rng.random_range(0.0..(k as f64).ln()));
        }
    }
    let gt: Vec<usize> = (0..px)
        .map(|_| {
            if rng.random_bool(0.3) {
                rng.random_range(k..k + 2)
            } else {
                0
            }
        })
        .collect();
    let gt_full = gt
        .iter()
        .map(|&g| if g == 0 { rng.random_range(0..k) } else { g })
        .collect();
    Fixture {
        gt,
        gt_full,
        probs,
        features,
        prototypes: PrototypeTable { dim: f, prototypes },
        thresholds: EntropyThresholds { tau },
        k,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn prototype_labels_are_a_subset_of_plain_labels(seed in any::<u64>(), t in 0.1f64..5.0) {
        let fx = fixture(seed);
        if fx.prototypes.is_empty() {
            return Ok(());
        }
        let proto = relabel(&fx.gt, &fx.probs, &fx.features, &fx.prototypes, &fx.thresholds, t).unwrap();
        let plain = plain_relabel(&fx.gt, &fx.probs, &fx.thresholds).unwrap();
        for (p, q) in proto.labels.iter().zip(&plain.labels) {
            if p.is_some() {
                prop_assert_eq!(p, q);
            }
        }
    }

    #[test]
    fn relabel_cases_partition_the_pixels(seed in any::<u64>()) {
        let fx = fixture(seed);
        if fx.prototypes.is_empty() {
            return Ok(());
        }
        let map = relabel(&fx.gt, &fx.probs, &fx.features, &fx.prototypes, &fx.thresholds, 1.0).unwrap();
        for (l, &g) in map.labels.iter().zip(&fx.gt) {
            if g != 0 {
                prop_assert_eq!(*l, Some(g));
            } else if let Some(c) = l {
                prop_assert!(*c < fx.k);
            }
        }
        let audit = LabelAudit::tally(&map, &fx.gt, &fx.gt_full, fx.k);
        prop_assert_eq!(audit.case1 + audit.case2 + audit.ignored, audit.pixel_count);
        prop_assert_eq!(audit.pixel_count as usize, fx.gt.len());
        prop_assert!(audit.old_correct <= audit.old_labeled);
    }

    #[test]
    fn correction_weights_sum_to_one_and_ignore_translation(
        seed in any::<u64>(),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
        t in 0.05f64..5.0,
    ) {
        let fx = fixture(seed);
        if fx.prototypes.is_empty() {
            return Ok(());
        }
        let f = fx.prototypes.dim;
        let feat: Vec<f64> = (0..f).map(|j| fx.features.data()[j]).collect();
        let z = correction_weights(&feat, &fx.prototypes, t, fx.k).unwrap();
        prop_assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (c, v) in z.iter().enumerate() {
            prop_assert!(*v >= 0.0);
            if fx.prototypes.get(c).is_none() {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let moved = PrototypeTable {
            dim: f,
            prototypes: fx
                .prototypes
                .prototypes
                .iter()
                .map(|(&c, eta)| (c, eta.iter().zip(&shift).map(|(a, s)| a + s).collect()))
                .collect(),
        };
        let feat2: Vec<f64> = feat.iter().zip(&shift).map(|(a, s)| a + s).collect();
        let z2 = correction_weights(&feat2, &moved, t, fx.k).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_a_distribution(data in prop::collection::vec(-30.0f64..30.0, 1..60), k in 1usize..6) {
        let px = (data.len() / k).max(1);
        let t = Tensor::from_fn(&[1, k, 1, px], |i| data[i % data.len()]);
        let p = softmax_channels(&t).unwrap();
        for q in 0..px {
            let s: f64 = (0..k).map(|c| p.data()[c * px + q]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_confidence_is_bounded(data in prop::collection::vec(-20.0f64..20.0, 2..40), k in 2usize..8) {
        let px = (data.len() / k).max(1);
        let logits = Tensor::from_fn(&[1, k, 1, px], |i| data[i % data.len()]);
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let p = tape.softmax(x).unwrap();
        let sc = sc_loss(&mut tape, p).unwrap().var;
        let v = tape.value(sc).item();
        prop_assert!(v >= 0.0);
        prop_assert!(v <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn exact_epoch_weights_average_to_one(seed in any::<u64>(), batches in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // background, step-0 channels 1..3, step-1 channel 3, current channels 4..6
        let boundaries = [3, 4];
        let mut stats = GradientStats::new(StatsMode::ExactEpoch, &boundaries);
        let mut all = Vec::new();
        for _ in 0..batches {
            let n = rng.random_range(1..40);
            let targets: Vec<Option<usize>> =
                (0..n).map(|_| (!rng.random_bool(0.2)).then(|| rng.random_range(0..6))).collect();
            let g: Vec<Option<f64>> = targets.iter().map(|t| t.map(|_| rng.random_range(-1.0..-1e-3))).collect();
            stats.update(&g, &targets).unwrap();
            all.push((g, targets));
        }
        stats.finish_epoch();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (g, targets) in &all {
            let psi = step_aware_weights(g, targets, &stats, f64::INFINITY);
            for (w, t) in psi.iter().zip(targets) {
                let Some(c) = t else { continue };
                let key = format!("{:?}", stat_group(*c, &boundaries));
                let e = sums.entry(key).or_default();
                e.0 += w;
                e.1 += 1;
            }
        }
        for (group, (s, n)) in sums {
            prop_assert!((s / n as f64 - 1.0).abs() < 1e-9, "{} mean {}", group, s / n as f64);
        }
    }

    #[test]
    fn weights_grow_with_gradient_magnitude(seed in any::<u64>(), psi_max in 1.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boundaries = [3];
        let mut stats = GradientStats::new(StatsMode::Ema { beta: 0.9 }, &boundaries);
        let targets: Vec<Option<usize>> = (0..30).map(|_| Some(rng.random_range(0..5))).collect();
        let g: Vec<Option<f64>> = targets.iter().map(|_| Some(rng.random_range(-1.0..0.0))).collect();
        stats.update(&g, &targets).unwrap();
        let psi = step_aware_weights(&g, &targets, &stats, psi_max);
        for a in 0..g.len() {
            for b in 0..g.len() {
                let (ga, gb) = (g[a].unwrap().abs(), g[b].unwrap().abs());
                let (ca, cb) = (targets[a].unwrap(), targets[b].unwrap());
                let same = stat_group(ca, &boundaries) == stat_group(cb, &boundaries);
                if same && stat_group(ca, &boundaries) != StatGroup::Current && ga <= gb {
                    prop_assert!(psi[a] <= psi[b]);
                }
            }
            prop_assert!(psi[a] >= 0.0 && psi[a] <= psi_max.max(1.0));
        }
    }

    #[test]
    fn gradient_measurement_is_in_range(data in prop::collection::vec(-10.0f64..10.0, 4..40)) {
        let k = 2;
        let px = data.len() / k;
        let sig = Tensor::from_fn(&[1, k, 1, px], |i| 1.0 / (1.0 + (-data[i]).exp()));
        let targets: Vec<Option<usize>> = (0..px).map(|i| if i % 3 == 0 { None } else { Some(i % k) }).collect();
        let g = gradient_measurement(&sig, &targets).unwrap();
        for (v, t) in g.iter().zip(&targets) {
            prop_assert_eq!(v.is_some(), t.is_some());
            if let Some(v) = v {
                prop_assert!((-1.0..=0.0).contains(v));
            }
        }
    }

    #[test]
    fn confusion_matrix_ignores_order_and_sharding(
        pairs in prop::collection::vec((0u8..6, 0u8..6), 1..200),
        seed in any::<u64>(),
        cut in 0usize..200,
    ) {
        let gt: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let mut whole = ConfusionMatrix::new(6);
        whole.add_pixels(&gt, &pred).unwrap();

        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut reordered = ConfusionMatrix::new(6);
        for (g, p) in &shuffled {
            reordered.add(*g as usize, *p as usize).unwrap();
        }
        prop_assert_eq!(&whole, &reordered);

        let cut = cut.min(pairs.len());
        let mut a = ConfusionMatrix::new(6);
        let mut b = ConfusionMatrix::new(6);
        a.add_pixels(&gt[..cut], &pred[..cut]).unwrap();
        b.add_pixels(&gt[cut..], &pred[cut..]).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(&whole, &a);
        prop_assert_eq!(whole.total(), pairs.len() as u64);
    }

    #[test]
    fn channels_and_class_ids_are_inverse(
        preset in 0usize..5,
        seed in any::<u64>(),
        overlapped in any::<bool>(),
        four_one in any::<bool>(),
    ) {
        let setting = if overlapped { Setting::Overlapped } else { Setting::Disjoint };
        let base = ScenarioSpec::preset(if four_one { "4-1" } else { "3-1x3" }, setting, 0).unwrap();
        let order: Vec<u8> = if four_one {
            CLASS_ORDER_PRESETS[preset].1.to_vec()
        } else {
            let mut o: Vec<u8> = (1..=base.num_classes() as u8).collect();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            o
        };
        let spec = base.permute_classes(&order).unwrap();
        let channel_of = spec.channel_of();
        let class_of = spec.class_of_channel();
        prop_assert_eq!(class_of.len(), spec.num_classes() + 1);
        prop_assert_eq!(class_of[0], 0);
        for (ch, &id) in class_of.iter().enumerate() {
            prop_assert_eq!(channel_of[id as usize], ch);
        }
        for t in 0..spec.steps() {
            for &id in &spec.groups[t] {
                let ch = channel_of[id as usize];
                prop_assert!(ch >= spec.head_width_at(t) - spec.groups[t].len() && ch < spec.head_width_at(t));
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), widths in prop::collection::vec(1usize..5, 1..3), classes in 1usize..4) {
        let arch = Architecture { in_channels: 3, widths, kernel: 3 };
        let net = SegNetwork::<f32>::new(&arch, classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = encode_checkpoint(&net);
        let back: SegNetwork<f32> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(encode_checkpoint(&back), bytes.clone());
        let wide: SegNetwork<f64> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(wide.cast::<f32>(), net);
    }
}
