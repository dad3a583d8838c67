//! Randomized property tests for the statistical invariants the library
//! depends on: statistics interpolation, pseudo-label thresholding, view
//! fusion, and metric accumulation.

use proptest::prelude::*;
use sada_core::augment::{self, ViewSpec};
use sada_core::metrics::{CalibrationHistogram, ConfusionMatrix};
use sada_core::norm::{self, NormStats};
use sada_core::pseudo;
use sada_core::tensor::{Tensor, U8Tensor};

const IGNORE: u8 = 255;

fn prob_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(1e-3f32..1.0, c * h * w).prop_map(move |raw| {
        let mut data = raw;
        for p in 0..h * w {
            let sum: f32 = (0..c).map(|k| data[k * h * w + p]).sum();
            for k in 0..c {
                data[k * h * w + p] /= sum;
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    })
}

fn stats_pair(c: usize) -> impl Strategy<Value = (NormStats, NormStats)> {
    let one = move || {
        (
            proptest::collection::vec(-50.0f32..50.0, c),
            proptest::collection::vec(0.0f32..100.0, c),
        )
            .prop_map(|(mean, var)| NormStats { mean, var })
    };
    (one(), one())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    /// The interpolated statistics are the convex combination of their
    /// operands, checked against a 64-bit oracle.
    #[test]
    fn interpolation_matches_f64_oracle((source, sample) in stats_pair(6), alpha in 0.0f32..=1.0) {
        let out = norm::interpolate(&source, &sample, alpha).unwrap();
        for k in 0..6 {
            let m = (1.0 - alpha as f64) * source.mean[k] as f64 + alpha as f64 * sample.mean[k] as f64;
            let v = (1.0 - alpha as f64) * source.var[k] as f64 + alpha as f64 * sample.var[k] as f64;
            prop_assert!((out.mean[k] as f64 - m).abs() <= 1e-7 * m.abs().max(1.0));
            prop_assert!((out.var[k] as f64 - v).abs() <= 1e-7 * v.abs().max(1.0));
            prop_assert!(out.var[k] >= 0.0);
        }
    }

    /// Interpolation is affine in alpha: the midpoint of the endpoint
    /// interpolations equals interpolation at the midpoint.
    #[test]
    fn interpolation_is_affine((source, sample) in stats_pair(4), a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let at = |t: f32| norm::interpolate(&source, &sample, t).unwrap();
        let (lo, hi, mid) = (at(a), at(b), at((a + b) / 2.0));
        for k in 0..4 {
            let expect = (lo.mean[k] as f64 + hi.mean[k] as f64) / 2.0;
            prop_assert!((mid.mean[k] as f64 - expect).abs() <= 1e-5 * expect.abs().max(1.0));
        }
    }

    /// Raising psi never labels more pixels, psi=0 labels everything, and
    /// every accepted label is the per-pixel argmax.
    #[test]
    fn pseudo_label_laws(probs in prob_map(4, 6, 5), lo in 0.0f32..=1.0, hi in 0.0f32..=1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let loose = pseudo::make_pseudo_gt(&probs, lo).unwrap();
        let tight = pseudo::make_pseudo_gt(&probs, hi).unwrap();
        prop_assert!(tight.coverage <= loose.coverage + 1e-6);

        let full = pseudo::make_pseudo_gt(&probs, 0.0).unwrap();
        prop_assert_eq!(full.coverage, 1.0);

        let argmax = pseudo::argmax_labels(&probs).unwrap();
        for (l, a) in tight.labels.data().iter().zip(argmax.data()) {
            prop_assert!(*l == IGNORE || l == a);
        }
        // labeled set at hi is a subset of the labeled set at lo
        for (t, l) in tight.labels.data().iter().zip(loose.labels.data()) {
            prop_assert!(*t == IGNORE || t == l);
        }
    }

    /// Positive rescaling of the fused map moves maxima and thresholds
    /// together, leaving the labels unchanged.
    #[test]
    fn pseudo_labels_ignore_positive_rescaling(probs in prob_map(3, 4, 4), psi in 0.0f32..=1.0, k in 0.1f32..8.0) {
        let scaled = Tensor::new(
            probs.shape().to_vec(),
            probs.data().iter().map(|v| v * k).collect(),
        ).unwrap();
        let a = pseudo::make_pseudo_gt(&probs, psi).unwrap();
        let b = pseudo::make_pseudo_gt(&scaled, psi).unwrap();
        prop_assert_eq!(a.labels.data(), b.labels.data());
    }

    /// Fusion outputs a probability field and does not care about view order.
    #[test]
    fn fusion_is_a_commutative_mean(maps in proptest::collection::vec(prob_map(3, 8, 8), 2..5), seed in 0u64..32) {
        let fused = augment::fuse(&maps).unwrap();
        let (c, h, w) = fused.probs.dims3().unwrap();
        prop_assert_eq!((c, h, w), (3, 8, 8));
        for p in 0..h * w {
            let sum: f32 = (0..c).map(|k| fused.probs.data()[k * h * w + p]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5);
        }

        let mut shuffled = maps.clone();
        let n = shuffled.len();
        shuffled.rotate_left(seed as usize % n);
        let refused = augment::fuse(&shuffled).unwrap();
        for (x, y) in fused.probs.data().iter().zip(refused.probs.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    /// Identity and flip view round trips reproduce the map bitwise.
    #[test]
    fn lossless_view_round_trips(map in prob_map(3, 8, 8)) {
        for spec in [ViewSpec::identity(), ViewSpec { scale: 1.0, flipped: true, grayscaled: false }] {
            let warped = augment::transform_map(&spec, &map).unwrap();
            let back = augment::invert_and_align(&spec, &warped, 8, 8).unwrap();
            prop_assert_eq!(back.data(), map.data());
        }
    }

    /// Confusion counting is associative and commutative across image chunks.
    #[test]
    fn confusion_merge_is_order_free(
        pairs in proptest::collection::vec((0u8..4, 0u8..5), 24..60),
        cut in 1usize..20,
        swap in proptest::bool::ANY,
    ) {
        let gt: Vec<u8> = pairs.iter().map(|(g, _)| *g).collect();
        // pred index 4 stands in for an ignored ground-truth pixel instead
        let pred: Vec<u8> = pairs.iter().map(|(_, p)| *p % 4).collect();
        let gt: Vec<u8> = gt.iter().zip(&pairs).map(|(g, (_, p))| if *p == 4 { IGNORE } else { *g }).collect();

        let tensor = |d: &[u8]| U8Tensor::new(vec![1, d.len()], d.to_vec()).unwrap();
        let mut whole = ConfusionMatrix::new(4);
        whole.update(&tensor(&gt), &tensor(&pred)).unwrap();

        let cut = cut.min(gt.len() - 1);
        let mut a = ConfusionMatrix::new(4);
        let mut b = ConfusionMatrix::new(4);
        a.update(&tensor(&gt[..cut]), &tensor(&pred[..cut])).unwrap();
        b.update(&tensor(&gt[cut..]), &tensor(&pred[cut..])).unwrap();
        let mut merged = if swap { b.clone() } else { a.clone() };
        merged.merge(if swap { &a } else { &b }).unwrap();

        for g in 0..4 {
            for p in 0..4 {
                prop_assert_eq!(whole.count(g, p), merged.count(g, p));
            }
        }
        prop_assert_eq!(whole.miou(), merged.miou());
    }

    /// ECE does not depend on the order pixels are observed in.
    #[test]
    fn ece_is_permutation_invariant(
        obs in proptest::collection::vec((0.01f32..=1.0, proptest::bool::ANY), 10..80),
        seed in 0u64..64,
    ) {
        let mut forward = CalibrationHistogram::new();
        for (c, ok) in &obs {
            forward.observe(*c, *ok);
        }
        let mut shuffled = obs.clone();
        let n = shuffled.len();
        // cheap deterministic shuffle: rotate then reverse a prefix
        shuffled.rotate_left(seed as usize % n);
        shuffled[..n / 2].reverse();
        let mut backward = CalibrationHistogram::new();
        for (c, ok) in &shuffled {
            backward.observe(*c, *ok);
        }
        prop_assert_eq!(forward.ece(), backward.ece());
    }
}

/// Downscaled views cannot reproduce arbitrary maps, but a map constant on
/// blocks matching the scale factor survives the downscale leg exactly.
#[test]
fn block_constant_maps_survive_downscale_views() {
    let mut data = vec![0.0f32; 2 * 8 * 8];
    for y in 0..8 {
        for x in 0..8 {
            let hot = usize::from((y / 4 + x / 4) % 2 == 0);
            data[hot * 64 + y * 8 + x] = 1.0;
        }
    }
    let map = Tensor::new(vec![2, 8, 8], data).unwrap();
    let spec = ViewSpec { scale: 0.5, flipped: false, grayscaled: false };
    let warped = augment::transform_map(&spec, &map).unwrap();
    assert_eq!(warped.shape(), &[2, 4, 4]);
    for y in 0..4 {
        for x in 0..4 {
            let hot = usize::from((y / 2 + x / 2) % 2 == 0);
            assert_eq!(warped.data()[hot * 16 + y * 4 + x], 1.0);
        }
    }
}
