//! Batch normalization with interpolated statistics at test time.
//!
//! Training uses ordinary batch statistics (biased variance) and keeps
//! exponential running estimates. At inference the layer normalizes with
//! a convex mix of the running (source) statistics and the statistics of
//! the sample being processed:
//!
//!   mean = (1 - alpha) * running_mean + alpha * sample_mean
//!   var  = (1 - alpha) * running_var  + alpha * sample_var
//!
//! alpha = 0 reproduces standard inference-time BN bit for bit, alpha = 1
//! is instance normalization; both endpoints short-circuit so no float
//! arithmetic muddies the equalities. Mixed statistics are constants for
//! the backward pass.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// How normalization layers behave at prediction time.
///
/// `TrainBn` normalizes with the running statistics gathered during source
/// training (each sample independent of its batch), `PredBn` with the
/// statistics of the sample itself, `San` with their interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    TrainBn,
    PredBn,
    San,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SanConfig {
    pub mode: NormMode,
    pub alpha: f32,
}

impl SanConfig {
    pub fn train_bn() -> Self {
        SanConfig { mode: NormMode::TrainBn, alpha: 0.0 }
    }

    pub fn pred_bn() -> Self {
        SanConfig { mode: NormMode::PredBn, alpha: 1.0 }
    }

    pub fn san(alpha: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(SanConfig { mode: NormMode::San, alpha })
    }

    /// The interpolation weight the mode boils down to.
    pub fn effective_alpha(&self) -> f32 {
        match self.mode {
            NormMode::TrainBn => 0.0,
            NormMode::PredBn => 1.0,
            NormMode::San => self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl NormStats {
    /// Fresh-layer statistics: zero mean, unit variance.
    pub fn unit(c: usize) -> Self {
        NormStats { mean: vec![0.0; c], var: vec![1.0; c] }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Convex interpolation of normalization statistics.
pub fn interpolate(source: &NormStats, sample: &NormStats, alpha: f32) -> Result<NormStats> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if source.len() != sample.len() {
        return Err(Error::shape(format!(
            "stat length mismatch: {} vs {}",
            source.len(),
            sample.len()
        )));
    }
    if alpha == 0.0 {
        return Ok(source.clone());
    }
    if alpha == 1.0 {
        return Ok(sample.clone());
    }
    // blend in f64 so the single rounding stays within 1e-7 of the formula
    let w = alpha as f64;
    let mix = |s: &[f32], t: &[f32]| {
        s.iter().zip(t).map(|(a, b)| ((1.0 - w) * *a as f64 + w * *b as f64) as f32).collect()
    };
    Ok(NormStats {
        mean: mix(&source.mean, &sample.mean),
        var: mix(&source.var, &sample.var),
    })
}

/// Per-channel mean and biased variance of a single sample.
pub fn compute_sample_stats(x: &Tensor) -> Result<NormStats> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::contract(format!("sample stats want batch extent 1, got {n}")));
    }
    let (mean, var) = kernels::sample_moments(x.data(), 1, c, h, w);
    Ok(NormStats { mean, var })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: NormStats,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running: NormStats::unit(c),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training forward: batch statistics drive the normalization (and its
    /// backward), and the running estimates move toward them.
    pub fn forward_train(&mut self, g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!("bn expects {} channels, got {c}", self.channels())));
        }
        let (mean, var) = kernels::channel_moments(g.value(x).data(), n, c, h, w);
        for ci in 0..c {
            self.running.mean[ci] = (1.0 - self.momentum) * self.running.mean[ci] + self.momentum * mean[ci];
            self.running.var[ci] = (1.0 - self.momentum) * self.running.var[ci] + self.momentum * var[ci];
        }
        g.bn_train(x, gamma, beta, mean, var, self.eps)
    }

    /// Inference forward with per-sample interpolated statistics.
    pub fn forward_eval(&self, g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId, alpha: f32) -> Result<NodeId> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!("bn expects {} channels, got {c}", self.channels())));
        }
        if alpha == 0.0 {
            return g.norm_fixed(x, gamma, beta, self.running.mean.clone(), self.running.var.clone(), self.eps);
        }
        let (sm, sv) = kernels::sample_moments(g.value(x).data(), n, c, h, w);
        let mut mean = Vec::with_capacity(n * c);
        let mut var = Vec::with_capacity(n * c);
        for ni in 0..n {
            let sample = NormStats {
                mean: sm[ni * c..(ni + 1) * c].to_vec(),
                var: sv[ni * c..(ni + 1) * c].to_vec(),
            };
            let mixed = interpolate(&self.running, &sample, alpha)?;
            mean.extend_from_slice(&mixed.mean);
            var.extend_from_slice(&mixed.var);
        }
        g.norm_fixed(x, gamma, beta, mean, var, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn stats(m: &[f32], v: &[f32]) -> NormStats {
        NormStats { mean: m.to_vec(), var: v.to_vec() }
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let src = stats(&[0.1, 0.2], &[1.0, 2.0]);
        let smp = stats(&[0.7, -0.3], &[0.5, 0.25]);
        assert_eq!(interpolate(&src, &smp, 0.0).unwrap(), src);
        assert_eq!(interpolate(&src, &smp, 1.0).unwrap(), smp);
    }

    #[test]
    fn interpolation_hand_case() {
        let src = stats(&[0.0], &[1.0]);
        let smp = stats(&[1.0], &[3.0]);
        let mid = interpolate(&src, &smp, 0.25).unwrap();
        assert!((mid.mean[0] - 0.25).abs() < 1e-7);
        assert!((mid.var[0] - 1.5).abs() < 1e-7);
        // source (0, 1), sample (2, 3), alpha 0.5 -> (1, 2)
        let half = interpolate(&stats(&[0.0], &[1.0]), &stats(&[2.0], &[3.0]), 0.5).unwrap();
        assert_eq!(half.mean[0], 1.0);
        assert_eq!(half.var[0], 2.0);
    }

    #[test]
    fn interpolation_is_affine_in_alpha() {
        let src = stats(&[0.3, -1.0], &[1.0, 2.5]);
        let smp = stats(&[2.0, 0.5], &[0.4, 4.0]);
        let at = |a: f32| interpolate(&src, &smp, a).unwrap();
        for i in 0..2 {
            let quarter = at(0.25).mean[i];
            let mid = at(0.5).mean[i];
            let threeq = at(0.75).mean[i];
            assert!((mid - 0.5 * (quarter + threeq)).abs() < 1e-6);
            let vq = at(0.25).var[i];
            let vm = at(0.5).var[i];
            let v3 = at(0.75).var[i];
            assert!((vm - 0.5 * (vq + v3)).abs() < 1e-6);
            assert!(vq >= 0.0 && vm >= 0.0 && v3 >= 0.0);
        }
    }

    #[test]
    fn sample_stats_hand_case() {
        // channel [[1,3],[5,7]]: mean 4, biased variance 5
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let s = compute_sample_stats(&x).unwrap();
        assert_eq!(s.mean, vec![4.0]);
        assert_eq!(s.var, vec![5.0]);
        let c = Tensor::full(&[1, 2, 3, 3], 0.7);
        let s = compute_sample_stats(&c).unwrap();
        for ci in 0..2 {
            assert!((s.mean[ci] - 0.7).abs() < 1e-6);
            assert!(s.var[ci].abs() < 1e-9);
        }
        // batch extent must be exactly one
        assert!(compute_sample_stats(&Tensor::zeros(&[2, 1, 2, 2])).is_err());
    }

    #[test]
    fn san_config_modes_map_to_alphas() {
        assert_eq!(SanConfig::train_bn().effective_alpha(), 0.0);
        assert_eq!(SanConfig::pred_bn().effective_alpha(), 1.0);
        assert_eq!(SanConfig::san(0.1).unwrap().effective_alpha(), 0.1);
        assert!(SanConfig::san(1.25).is_err());
        assert!(SanConfig::san(-0.1).is_err());
    }

    #[test]
    fn constant_channel_train_forward_returns_beta() {
        let mut bn = BatchNorm::new(1);
        bn.beta = Tensor::full(&[1], 0.4);
        let x = Tensor::full(&[1, 1, 2, 2], 3.0);
        let mut g = Graph::new();
        let xid = g.leaf(x, false);
        let ga = g.constant(bn.gamma.clone());
        let be = g.constant(bn.beta.clone());
        let y = bn.forward_train(&mut g, xid, ga, be).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_validates_inputs() {
        let src = stats(&[0.0], &[1.0]);
        let smp = stats(&[1.0, 2.0], &[3.0, 4.0]);
        assert!(interpolate(&src, &smp, 0.5).is_err());
        let smp1 = stats(&[1.0], &[3.0]);
        assert!(interpolate(&src, &smp1, -0.1).is_err());
        assert!(interpolate(&src, &smp1, 1.5).is_err());
    }

    fn rand_x(shape: &[usize], tag: u64) -> Tensor {
        let mut r = rng::stream(5, &[tag]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-2.0..2.0f32)).collect()).unwrap()
    }

    #[test]
    fn train_forward_standardizes_batch() {
        let mut bn = BatchNorm::new(3);
        let x = rand_x(&[2, 3, 4, 4], 1);
        let mut g = Graph::new();
        let xid = g.leaf(x, false);
        let ga = g.constant(bn.gamma.clone());
        let be = g.constant(bn.beta.clone());
        let y = bn.forward_train(&mut g, xid, ga, be).unwrap();
        let (m, v) = kernels::channel_moments(g.value(y).data(), 2, 3, 4, 4);
        for ci in 0..3 {
            assert!(m[ci].abs() < 1e-5, "channel {ci} mean {}", m[ci]);
            assert!((v[ci] - 1.0).abs() < 1e-3, "channel {ci} var {}", v[ci]);
        }
    }

    #[test]
    fn running_stats_move_with_momentum() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let xid = g.leaf(x, false);
        let ga = g.constant(bn.gamma.clone());
        let be = g.constant(bn.beta.clone());
        bn.forward_train(&mut g, xid, ga, be).unwrap();
        // batch mean 2, biased var 1; running starts at (0, 1), momentum 0.1
        assert!((bn.running.mean[0] - 0.2).abs() < 1e-6);
        assert!((bn.running.var[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn alpha_zero_uses_running_stats_bitwise() {
        let mut bn = BatchNorm::new(2);
        bn.running = stats(&[0.5, -0.25], &[2.0, 0.5]);
        let x = rand_x(&[1, 2, 3, 3], 2);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false);
        let ga = g.constant(bn.gamma.clone());
        let be = g.constant(bn.beta.clone());
        let y = bn.forward_eval(&mut g, xid, ga, be, 0.0).unwrap();
        // reference: same normalization written out longhand
        let hw = 9;
        for ci in 0..2 {
            let s = 1.0 / (bn.running.var[ci] + bn.eps).sqrt();
            for i in 0..hw {
                let want = (x.data()[ci * hw + i] - bn.running.mean[ci]) * s;
                assert_eq!(g.value(y).data()[ci * hw + i], want);
            }
        }
    }

    #[test]
    fn alpha_one_standardizes_each_sample() {
        let bn = BatchNorm::new(2); // running stats deliberately stale (0, 1)
        let mut x = rand_x(&[2, 2, 4, 4], 3);
        for v in x.data_mut().iter_mut() {
            *v = *v * 3.0 + 5.0; // far from the running stats
        }
        let mut g = Graph::new();
        let xid = g.leaf(x, false);
        let ga = g.constant(bn.gamma.clone());
        let be = g.constant(bn.beta.clone());
        let y = bn.forward_eval(&mut g, xid, ga, be, 1.0).unwrap();
        let (m, v) = kernels::sample_moments(g.value(y).data(), 2, 2, 4, 4);
        for i in 0..4 {
            assert!(m[i].abs() < 1e-4, "plane {i} mean {}", m[i]);
            assert!((v[i] - 1.0).abs() < 1e-2, "plane {i} var {}", v[i]);
        }
    }

    #[test]
    fn intermediate_alpha_lies_between_endpoints() {
        let mut bn = BatchNorm::new(1);
        bn.running = stats(&[1.0], &[4.0]);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let out_at = |alpha: f32| {
            let mut g = Graph::new();
            let xid = g.leaf(x.clone(), false);
            let ga = g.constant(bn.gamma.clone());
            let be = g.constant(bn.beta.clone());
            let y = bn.forward_eval(&mut g, xid, ga, be, alpha).unwrap();
            g.value(y).data().to_vec()
        };
        let (a0, a5, a1) = (out_at(0.0), out_at(0.5), out_at(1.0));
        for i in 0..4 {
            let lo = a0[i].min(a1[i]);
            let hi = a0[i].max(a1[i]);
            assert!(a5[i] >= lo - 1e-5 && a5[i] <= hi + 1e-5);
        }
    }
}
