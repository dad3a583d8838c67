//! Segmentation quality instruments: confusion-matrix mIoU and expected
//! calibration error over max-softmax confidences.
//!
//! Both accumulators are mergeable so per-image chunks can be pooled in any
//! grouping; the harness merges them in a fixed order to keep outputs
//! byte-stable.

use crate::error::{Error, Result};
use crate::graph::IGNORE_LABEL;
use crate::tensor::{Tensor, U8Tensor};

/// Number of equal-width confidence bins.
pub const N_BINS: usize = 10;

/// C x C pixel counts; rows index ground truth, columns index prediction.
/// IGNORE pixels are never counted.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Total counted pixels (all non-ignored ground-truth pixels seen).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, gt: &U8Tensor, pred: &U8Tensor) -> Result<()> {
        if gt.shape() != pred.shape() {
            return Err(Error::shape(format!(
                "ground truth shape {:?} != prediction shape {:?}",
                gt.shape(),
                pred.shape()
            )));
        }
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.num_classes || p >= self.num_classes {
                return Err(Error::contract(format!(
                    "label pair ({g}, {p}) outside {} classes",
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::contract(format!(
                "cannot merge {}-class matrix into {}-class matrix",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU and the mean over classes with a nonzero union.
    /// A class absent from both prediction and ground truth has no defined
    /// IoU and is excluded; if every class is absent the mean is None.
    pub fn miou(&self) -> (Vec<Option<f64>>, Option<f64>) {
        let c = self.num_classes;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0f64;
        let mut defined = 0usize;
        for k in 0..c {
            let tp = self.count(k, k);
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for j in 0..c {
                if j != k {
                    fp += self.count(j, k);
                    fn_ += self.count(k, j);
                }
            }
            let union = tp + fp + fn_;
            if union == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / union as f64;
                per_class.push(Some(iou));
                sum += iou;
                defined += 1;
            }
        }
        let mean = if defined == 0 { None } else { Some(sum / defined as f64) };
        (per_class, mean)
    }
}

/// Fixed-point scale for confidence sums. Integer accumulation keeps merges
/// exactly commutative and associative, so pooled ECE does not depend on the
/// order images are merged in.
const CONF_SCALE: f64 = (1u64 << 53) as f64;

/// Ten right-closed confidence bins over (0,1]; bin k covers (k/10, (k+1)/10].
/// Softmax confidences are strictly positive so no pixel falls below bin 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationHistogram {
    count: [u64; N_BINS],
    conf_sum: [u128; N_BINS],
    correct: [u64; N_BINS],
}

impl Default for CalibrationHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl CalibrationHistogram {
    pub fn new() -> Self {
        CalibrationHistogram {
            count: [0; N_BINS],
            conf_sum: [0; N_BINS],
            correct: [0; N_BINS],
        }
    }

    fn bin(confidence: f64) -> usize {
        ((confidence * N_BINS as f64).ceil() as usize).clamp(1, N_BINS) - 1
    }

    pub fn observe(&mut self, confidence: f32, correct: bool) {
        let b = Self::bin(confidence as f64);
        self.count[b] += 1;
        self.conf_sum[b] += (confidence as f64 * CONF_SCALE).round() as u128;
        if correct {
            self.correct[b] += 1;
        }
    }

    /// Scores one image: confidence is the winning softmax probability,
    /// correctness the match against a non-ignored ground-truth label.
    pub fn observe_image(&mut self, probs: &Tensor, gt: &U8Tensor) -> Result<()> {
        let (c, h, w) = probs.dims3()?;
        let (gh, gw) = gt.dims2()?;
        if (gh, gw) != (h, w) {
            return Err(Error::shape(format!(
                "probability map {h}x{w} does not match mask {gh}x{gw}"
            )));
        }
        let plane = h * w;
        for px in 0..plane {
            let label = gt.data()[px];
            if label == IGNORE_LABEL {
                continue;
            }
            let mut best_c = 0usize;
            let mut best_p = probs.data()[px];
            for ch in 1..c {
                let p = probs.data()[ch * plane + px];
                if p > best_p {
                    best_p = p;
                    best_c = ch;
                }
            }
            self.observe(best_p, best_c == label as usize);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationHistogram) {
        for b in 0..N_BINS {
            self.count[b] += other.count[b];
            self.conf_sum[b] += other.conf_sum[b];
            self.correct[b] += other.correct[b];
        }
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum()
    }

    /// ECE = sum over bins of (n_b/n) * |accuracy_b - mean confidence_b|;
    /// None when no pixel was observed.
    pub fn ece(&self) -> Option<f64> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let mut acc = 0.0f64;
        for b in 0..N_BINS {
            if self.count[b] == 0 {
                continue;
            }
            let nb = self.count[b] as f64;
            let mean_conf = self.conf_sum[b] as f64 / CONF_SCALE / nb;
            let gap = (self.correct[b] as f64 / nb - mean_conf).abs();
            acc += nb / n as f64 * gap;
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: Vec<usize>, data: Vec<u8>) -> U8Tensor {
        U8Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_miou_one() {
        let gt = mask(vec![2, 2], vec![0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&gt, &gt).unwrap();
        let (per_class, mean) = cm.miou();
        assert_eq!(per_class, vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(mean, Some(1.0));
    }

    #[test]
    fn complement_prediction_has_miou_zero() {
        let gt = mask(vec![1, 4], vec![0, 0, 1, 1]);
        let pred = mask(vec![1, 4], vec![1, 1, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&gt, &pred).unwrap();
        let (per_class, mean) = cm.miou();
        assert_eq!(per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(mean, Some(0.0));
    }

    #[test]
    fn four_pixel_hand_count() {
        let gt = mask(vec![1, 4], vec![0, 0, 1, 1]);
        let pred = mask(vec![1, 4], vec![0, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&gt, &pred).unwrap();
        let (per_class, mean) = cm.miou();
        assert_eq!(per_class[0], Some(0.5));
        assert_eq!(per_class[1], Some(2.0 / 3.0));
        assert!((mean.unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let gt = mask(vec![1, 2], vec![0, 1]);
        let pred = mask(vec![1, 2], vec![0, 1]);
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&gt, &pred).unwrap();
        let (per_class, mean) = cm.miou();
        assert_eq!(per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(mean, Some(1.0));
    }

    #[test]
    fn empty_matrix_has_undefined_mean() {
        let cm = ConfusionMatrix::new(3);
        let (per_class, mean) = cm.miou();
        assert!(per_class.iter().all(|c| c.is_none()));
        assert_eq!(mean, None);
    }

    #[test]
    fn ignored_pixels_never_count() {
        let gt = mask(vec![1, 4], vec![0, IGNORE_LABEL, 1, IGNORE_LABEL]);
        let pred = mask(vec![1, 4], vec![0, 0, 0, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&gt, &pred).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 0), 1);
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let mut cm = ConfusionMatrix::new(2);
        let gt = mask(vec![1, 2], vec![0, 1]);
        let short = mask(vec![1, 1], vec![0]);
        assert!(cm.update(&gt, &short).is_err());
        let wild = mask(vec![1, 2], vec![0, 7]);
        assert!(cm.update(&gt, &wild).is_err());
    }

    #[test]
    fn streaming_equals_batch_accumulation() {
        let gt_a = mask(vec![1, 4], vec![0, 1, 2, 1]);
        let pr_a = mask(vec![1, 4], vec![0, 1, 1, 1]);
        let gt_b = mask(vec![1, 3], vec![2, 2, 0]);
        let pr_b = mask(vec![1, 3], vec![2, 0, 0]);
        let mut whole = ConfusionMatrix::new(3);
        whole.update(&gt_a, &pr_a).unwrap();
        whole.update(&gt_b, &pr_b).unwrap();
        let mut a = ConfusionMatrix::new(3);
        a.update(&gt_a, &pr_a).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.update(&gt_b, &pr_b).unwrap();
        let mut merged = ConfusionMatrix::new(3);
        merged.merge(&a).unwrap();
        merged.merge(&b).unwrap();
        assert_eq!(merged, whole);
        let mut swapped = ConfusionMatrix::new(3);
        swapped.merge(&b).unwrap();
        swapped.merge(&a).unwrap();
        assert_eq!(swapped, whole);
    }

    #[test]
    fn perfectly_confident_correct_predictions_have_zero_ece() {
        let mut h = CalibrationHistogram::new();
        for _ in 0..10 {
            h.observe(1.0, true);
        }
        assert_eq!(h.ece(), Some(0.0));
    }

    #[test]
    fn overconfident_half_right_gives_half() {
        let mut h = CalibrationHistogram::new();
        for i in 0..10 {
            h.observe(1.0, i % 2 == 0);
        }
        assert!((h.ece().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_bin_hand_case() {
        // Confidences chosen exactly representable in binary so the oracle
        // arithmetic below is exact: 8 pixels at 0.5 (2 right), 6 at 0.75
        // (3 right), 6 at 1.0 (all right).
        let mut h = CalibrationHistogram::new();
        for i in 0..8 {
            h.observe(0.5, i < 2);
        }
        for i in 0..6 {
            h.observe(0.75, i < 3);
        }
        for _ in 0..6 {
            h.observe(1.0, true);
        }
        assert_eq!(h.total(), 20);
        let want = 8.0 / 20.0 * (0.5 - 0.25) + 6.0 / 20.0 * (0.75 - 0.5) + 0.0;
        assert!((h.ece().unwrap() - want).abs() < 1e-12);
        assert_eq!(want, 0.175);
    }

    #[test]
    fn bins_are_right_closed() {
        assert_eq!(CalibrationHistogram::bin(0.5), 4);
        assert_eq!(CalibrationHistogram::bin(0.25), 2);
        assert_eq!(CalibrationHistogram::bin(0.75), 7);
        assert_eq!(CalibrationHistogram::bin(1.0), 9);
        assert_eq!(CalibrationHistogram::bin(0.500001), 5);
        assert_eq!(CalibrationHistogram::bin(1e-9), 0);
    }

    #[test]
    fn histogram_merge_matches_single_pass() {
        let confs = [0.13f32, 0.5, 0.62, 0.88, 0.97, 0.31, 0.75, 1.0];
        let hits = [true, false, true, true, false, false, true, true];
        let mut whole = CalibrationHistogram::new();
        for (c, k) in confs.iter().zip(hits) {
            whole.observe(*c, k);
        }
        let mut left = CalibrationHistogram::new();
        let mut right = CalibrationHistogram::new();
        for (i, (c, k)) in confs.iter().zip(hits).enumerate() {
            if i < 4 {
                left.observe(*c, k);
            } else {
                right.observe(*c, k);
            }
        }
        left.merge(&right);
        assert_eq!(left.count, whole.count);
        assert_eq!(left.correct, whole.correct);
        assert!((left.ece().unwrap() - whole.ece().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_histogram_has_undefined_ece() {
        assert_eq!(CalibrationHistogram::new().ece(), None);
    }

    #[test]
    fn observe_image_scores_winning_class_and_skips_ignore() {
        // 2 classes on 1x2: pixel 0 -> (0.75, 0.25) pred 0, pixel 1 ignored.
        let probs = Tensor::new(vec![2, 1, 2], vec![0.75, 0.6, 0.25, 0.4]).unwrap();
        let gt = mask(vec![1, 2], vec![0, IGNORE_LABEL]);
        let mut h = CalibrationHistogram::new();
        h.observe_image(&probs, &gt).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.ece(), Some(0.25));
        let bad = mask(vec![2, 2], vec![0, 0, 0, 0]);
        assert!(h.observe_image(&probs, &bad).is_err());
    }
}
