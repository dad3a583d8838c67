//! Thresholded pseudo ground truth from a fused probability map.
//!
//! Each class gets a threshold t_c = psi * (spatial max of that class's
//! probability). A pixel is labeled with its argmax class when the winning
//! probability reaches the winning class's threshold, and IGNORE otherwise.

use crate::error::{Error, Result};
pub use crate::graph::IGNORE_LABEL;
use crate::tensor::{Tensor, U8Tensor};

/// Pseudo ground truth for one image.
#[derive(Debug, Clone)]
pub struct PseudoLabelMap {
    /// H x W class indices, IGNORE_LABEL where the confidence test failed.
    pub labels: U8Tensor,
    /// Per-class acceptance thresholds t_c.
    pub thresholds: Vec<f32>,
    pub psi: f32,
    /// Fraction of pixels that received a real label.
    pub coverage: f32,
}

fn check_map(probs: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = probs.dims3()?;
    if c == 0 || c > 255 {
        return Err(Error::contract(format!(
            "class count {c} not representable next to the ignore sentinel"
        )));
    }
    Ok((c, h, w))
}

fn check_psi(psi: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::contract(format!("psi must lie in [0,1], got {psi}")));
    }
    Ok(())
}

/// Per-class thresholds t_c = psi * max over pixels of probs[c].
pub fn class_thresholds(probs: &Tensor, psi: f32) -> Result<Vec<f32>> {
    let (c, h, w) = check_map(probs)?;
    check_psi(psi)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut best = f32::NEG_INFINITY;
        for &v in &probs.data()[ch * plane..(ch + 1) * plane] {
            if v > best {
                best = v;
            }
        }
        out.push(psi * best);
    }
    Ok(out)
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_labels(probs: &Tensor) -> Result<U8Tensor> {
    let (c, h, w) = check_map(probs)?;
    let plane = h * w;
    let mut labels = vec![0u8; plane];
    for px in 0..plane {
        let mut best_c = 0usize;
        let mut best_p = probs.data()[px];
        for ch in 1..c {
            let p = probs.data()[ch * plane + px];
            if p > best_p {
                best_p = p;
                best_c = ch;
            }
        }
        labels[px] = best_c as u8;
    }
    U8Tensor::new(vec![h, w], labels)
}

/// Builds the pseudo ground truth for a fused map (C x H x W).
pub fn make_pseudo_gt(probs: &Tensor, psi: f32) -> Result<PseudoLabelMap> {
    let (c, h, w) = check_map(probs)?;
    let thresholds = class_thresholds(probs, psi)?;
    let plane = h * w;
    let mut labels = vec![IGNORE_LABEL; plane];
    let mut kept = 0usize;
    for px in 0..plane {
        let mut best_c = 0usize;
        let mut best_p = probs.data()[px];
        for ch in 1..c {
            let p = probs.data()[ch * plane + px];
            if p > best_p {
                best_p = p;
                best_c = ch;
            }
        }
        if best_p >= thresholds[best_c] {
            labels[px] = best_c as u8;
            kept += 1;
        }
    }
    Ok(PseudoLabelMap {
        labels: U8Tensor::new(vec![h, w], labels)?,
        thresholds,
        psi,
        coverage: kept as f32 / plane as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Pixel-major probability rows packed into the C x H x W layout.
    fn map_from_pixel_rows(c: usize, h: usize, w: usize, rows: &[&[f32]]) -> Tensor {
        assert_eq!(rows.len(), h * w);
        let mut data = vec![0.0f32; c * h * w];
        for (px, row) in rows.iter().enumerate() {
            for (ch, &p) in row.iter().enumerate() {
                data[ch * h * w + px] = p;
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[rng::str_tag("pseudo-test")]);
        let plane = h * w;
        let mut data = vec![0.0f32; c * plane];
        for px in 0..plane {
            let raw: Vec<f32> = (0..c).map(|_| r.gen_range(0.01f32..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            for (ch, v) in raw.iter().enumerate() {
                data[ch * plane + px] = v / sum;
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn two_by_two_hand_enumerated_case() {
        let probs = map_from_pixel_rows(
            3,
            2,
            2,
            &[
                &[0.6, 0.3, 0.1],
                &[0.4, 0.5, 0.1],
                &[0.2, 0.2, 0.6],
                &[0.34, 0.33, 0.33],
            ],
        );
        let gt = make_pseudo_gt(&probs, 0.7).unwrap();
        let want_t = [0.7f32 * 0.6, 0.7 * 0.5, 0.7 * 0.6];
        for (a, b) in gt.thresholds.iter().zip(want_t) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(gt.labels.data(), &[0, 1, 2, IGNORE_LABEL]);
        assert_eq!(gt.coverage, 0.75);
    }

    #[test]
    fn thresholds_match_scalar_loop_oracle() {
        let probs = random_map(5, 6, 7, 41);
        let got = class_thresholds(&probs, 0.7).unwrap();
        let plane = 42;
        for ch in 0..5 {
            let mut best = 0.0f32;
            for px in 0..plane {
                let v = probs.data()[ch * plane + px];
                if v > best {
                    best = v;
                }
            }
            assert_eq!(got[ch], 0.7 * best);
        }
    }

    #[test]
    fn psi_zero_labels_everything() {
        let probs = random_map(4, 5, 5, 42);
        let gt = make_pseudo_gt(&probs, 0.0).unwrap();
        assert!(gt.thresholds.iter().all(|&t| t == 0.0));
        assert_eq!(gt.coverage, 1.0);
        assert!(gt.labels.data().iter().all(|&l| l != IGNORE_LABEL));
    }

    #[test]
    fn psi_one_keeps_exactly_the_class_max_attaining_winners() {
        let probs = random_map(3, 4, 4, 43);
        let gt = make_pseudo_gt(&probs, 1.0).unwrap();
        let plane = 16;
        for px in 0..plane {
            let mut best_c = 0usize;
            let mut best_p = probs.data()[px];
            for ch in 1..3 {
                let p = probs.data()[ch * plane + px];
                if p > best_p {
                    best_p = p;
                    best_c = ch;
                }
            }
            let class_max = (0..plane)
                .map(|q| probs.data()[best_c * plane + q])
                .fold(f32::NEG_INFINITY, f32::max);
            let want = if best_p >= class_max { best_c as u8 } else { IGNORE_LABEL };
            assert_eq!(gt.labels.data()[px], want, "pixel {px}");
        }
        assert!(gt.coverage > 0.0);
    }

    #[test]
    fn uniform_map_ties_to_class_zero() {
        let third = 1.0f32 / 3.0;
        let probs = Tensor::full(&[3, 2, 2], third);
        let gt = make_pseudo_gt(&probs, 0.7).unwrap();
        assert!(gt.labels.data().iter().all(|&l| l == 0));
        assert_eq!(gt.coverage, 1.0);
    }

    #[test]
    fn coverage_is_non_increasing_in_psi() {
        for seed in 0..5u64 {
            let probs = random_map(4, 8, 8, 100 + seed);
            let mut prev = f32::INFINITY;
            for step in 0..=10 {
                let gt = make_pseudo_gt(&probs, step as f32 / 10.0).unwrap();
                assert!(
                    gt.coverage <= prev,
                    "seed {seed}: coverage rose from {prev} at psi step {step}"
                );
                prev = gt.coverage;
            }
        }
    }

    #[test]
    fn labeled_pixels_agree_with_argmax() {
        let probs = random_map(5, 7, 6, 77);
        let gt = make_pseudo_gt(&probs, 0.5).unwrap();
        let arg = argmax_labels(&probs).unwrap();
        let mut kept = 0;
        for (l, a) in gt.labels.data().iter().zip(arg.data()) {
            if *l != IGNORE_LABEL {
                assert_eq!(l, a);
                kept += 1;
            }
        }
        assert_eq!(gt.coverage, kept as f32 / 42.0);
    }

    #[test]
    fn positive_rescaling_leaves_labels_unchanged() {
        let probs = random_map(4, 6, 6, 88);
        let scaled =
            Tensor::new(vec![4, 6, 6], probs.data().iter().map(|v| v * 2.5).collect()).unwrap();
        let a = make_pseudo_gt(&probs, 0.6).unwrap();
        let b = make_pseudo_gt(&scaled, 0.6).unwrap();
        assert_eq!(a.labels.data(), b.labels.data());
        for (ta, tb) in a.thresholds.iter().zip(&b.thresholds) {
            assert!((tb - 2.5 * ta).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let probs = random_map(3, 2, 2, 99);
        assert!(make_pseudo_gt(&probs, -0.1).is_err());
        assert!(make_pseudo_gt(&probs, 1.1).is_err());
        assert!(make_pseudo_gt(&probs, f32::NAN).is_err());
        let wide = Tensor::zeros(&[256, 1, 1]);
        assert!(make_pseudo_gt(&wide, 0.5).is_err());
        assert!(class_thresholds(&Tensor::zeros(&[4, 4]), 0.5).is_err());
    }
}
