//! Per-sample adaptation at test time and its baselines.
//!
//! `adapt_one` fine-tunes a copy of the source parameters on self-generated
//! pseudo-labels for one image, predicts, then restores the source weights so
//! the next sample starts clean. `tta_predict` fuses augmented views without
//! touching parameters; `entropy_adapt` minimizes prediction entropy on the
//! single original view. `evaluate_set` runs any method over a manifest and
//! pools the metrics.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{self, FusedProbMap, View};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{softmax_nchw, Graph, NodeId};
use crate::io::{self, ManifestEntry};
use crate::metrics::{CalibrationHistogram, ConfusionMatrix};
use crate::model::{ParamBinding, TinySegNet, DEFAULT_ADAPT_GROUPS};
use crate::norm::SanConfig;
use crate::optim::Sgd;
use crate::pseudo::{self, PseudoLabelMap};
use crate::tensor::{Tensor, U8Tensor};

/// Hyperparameters of the test-time procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Pseudo-label confidence factor.
    pub psi: f32,
    /// Adaptation learning rate.
    pub eta: f32,
    /// Number of fine-tuning iterations per sample.
    pub n_iters: u32,
    /// View scales; 1.0 is always added if missing.
    pub scales: Vec<f32>,
    pub use_flip: bool,
    pub use_gray: bool,
    /// Parameter groups updated during adaptation.
    pub adapt_groups: Vec<String>,
    /// Interpolation weight between source running stats and sample stats.
    pub alpha: f32,
    /// SGD momentum during adaptation (plain SGD by default).
    pub momentum_adapt: f32,
    /// Apply the cross-entropy loss to every view instead of only the
    /// original-resolution color view (sensitivity switch, off by default).
    pub loss_on_all_views: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            psi: 0.7,
            eta: 0.05,
            n_iters: 10,
            scales: vec![0.25, 0.5, 0.75, 1.0],
            use_flip: true,
            use_gray: true,
            adapt_groups: DEFAULT_ADAPT_GROUPS.iter().map(|s| s.to_string()).collect(),
            alpha: 0.1,
            momentum_adapt: 0.0,
            loss_on_all_views: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::contract(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.psi) {
            return Err(Error::contract(format!("psi must lie in [0,1], got {}", self.psi)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.momentum_adapt) {
            return Err(Error::contract(format!(
                "momentum_adapt must lie in [0,1), got {}",
                self.momentum_adapt
            )));
        }
        TinySegNet::validate_groups(&self.adapt_groups)?;
        for &s in &self.scales {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::contract(format!("scale must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Normalization mode used by every test-time forward.
    pub fn san(&self) -> Result<SanConfig> {
        SanConfig::san(self.alpha)
    }
}

/// Counters for guarded events during one adaptation session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardCounts {
    /// Iterations whose update was skipped for lack of labeled pixels.
    pub skipped_updates: u32,
    /// View scales dropped because the scaled extent fell below the minimum.
    pub skipped_scales: u32,
    /// Division guards triggered inside backward passes.
    pub guard_hits: u64,
}

/// Diagnostics from one adaptation session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Loss per performed update, in iteration order.
    pub losses: Vec<f32>,
    /// Pseudo-label coverage per iteration.
    pub coverage: Vec<f32>,
    pub wall_ms: u64,
    pub guards: GuardCounts,
}

/// Final prediction of one session plus its report.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// H x W argmax mask of the final forward.
    pub mask: U8Tensor,
    /// C x H x W softmax of the final forward.
    pub probs: Tensor,
    pub report: AdaptReport,
}

/// Evaluation baselines and procedures the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Running train statistics (alpha = 0 limit).
    Tbn,
    /// Current-sample statistics only (alpha = 1 limit).
    Pbn,
    /// Interpolated statistics, no updates.
    San,
    /// Multi-view fusion, no updates.
    Tta,
    /// Pseudo-label fine-tuning.
    Adapt,
    /// Entropy-minimization fine-tuning.
    Entropy,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Tbn, Method::Pbn, Method::San, Method::Tta, Method::Adapt, Method::Entropy];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Tbn => "tbn",
            Method::Pbn => "pbn",
            Method::San => "san",
            Method::Tta => "tta",
            Method::Adapt => "adapt",
            Method::Entropy => "entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown method '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn softmax_of(logits: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if n != 1 {
        return Err(Error::shape("expected a single-sample logits batch"));
    }
    let mut probs = vec![0.0f32; logits.len()];
    softmax_nchw(logits.data(), 1, c, h, w, &mut probs);
    Tensor::new(vec![c, h, w], probs)
}

/// Single forward pass under the given normalization mode: argmax mask plus
/// the softmax map it came from.
pub fn plain_predict(
    net: &TinySegNet,
    image: &Tensor,
    cfg: &SanConfig,
) -> Result<(U8Tensor, Tensor)> {
    let logits = net.predict_logits(image, cfg)?;
    let probs = softmax_of(&logits)?;
    let mask = pseudo::argmax_labels(&probs)?;
    Ok((mask, probs))
}

/// Forwards every view, aligns the softmax maps back to the original frame,
/// and fuses them by averaging. `skipped` counts dropped scales.
fn fused_prediction(
    net: &TinySegNet,
    g: &mut Graph,
    bind: &ParamBinding,
    views: &[View],
    san: &SanConfig,
    orig_h: usize,
    orig_w: usize,
) -> Result<(FusedProbMap, Vec<NodeId>)> {
    let mut aligned = Vec::with_capacity(views.len());
    let mut logit_ids = Vec::with_capacity(views.len());
    for v in views {
        let x = v.image.unsqueeze0();
        let logits = net.forward_eval(g, bind, &x, san)?;
        logit_ids.push(logits);
        let probs = softmax_of(g.value(logits))?;
        aligned.push(augment::invert_and_align(&v.spec, &probs, orig_h, orig_w)?);
    }
    Ok((augment::fuse(&aligned)?, logit_ids))
}

/// Pseudo ground truth warped into a view's geometry (nearest resize, then
/// the view's mirror).
fn warp_labels(spec: &augment::ViewSpec, labels: &U8Tensor, vh: usize, vw: usize) -> Result<U8Tensor> {
    let resized = labels.resize_nearest(vh, vw)?;
    Ok(if spec.flipped { resized.hflip() } else { resized })
}

/// Cross-entropy node for one iteration. With `loss_on_all_views` off this is
/// the loss of the original-resolution color view; otherwise the mean over
/// views that still contain labeled pixels after warping.
fn iteration_loss(
    g: &mut Graph,
    views: &[View],
    logit_ids: &[NodeId],
    gt: &PseudoLabelMap,
    loss_on_all_views: bool,
) -> Result<NodeId> {
    if !loss_on_all_views {
        let idx = views
            .iter()
            .position(|v| v.spec.is_identity())
            .ok_or_else(|| Error::contract("view set lost its original-resolution color view"))?;
        return g.masked_cross_entropy(logit_ids[idx], &gt.labels);
    }
    let mut terms = Vec::new();
    for (v, &id) in views.iter().zip(logit_ids) {
        let (_, _, vh, vw) = g.value(id).dims4()?;
        let warped = warp_labels(&v.spec, &gt.labels, vh, vw)?;
        if warped.data().iter().all(|&l| l == pseudo::IGNORE_LABEL) {
            continue;
        }
        terms.push(g.masked_cross_entropy(id, &warped)?);
    }
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::contract("no view kept a labeled pixel"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f32))
}

fn finish_report(
    net: &TinySegNet,
    image: &Tensor,
    san: &SanConfig,
    losses: Vec<f32>,
    coverage: Vec<f32>,
    guards: GuardCounts,
    started: Instant,
) -> Result<AdaptOutcome> {
    let (mask, probs) = plain_predict(net, image, san)?;
    Ok(AdaptOutcome {
        mask,
        probs,
        report: AdaptReport {
            losses,
            coverage,
            wall_ms: started.elapsed().as_millis() as u64,
            guards,
        },
    })
}

/// One self-adaptation session: N_t iterations of (re)build pseudo-labels and
/// take an SGD step, then a single forward for the final mask, then reset.
pub fn adapt_one(net: &mut TinySegNet, image: &Tensor, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let san = cfg.san()?;
    let (_, orig_h, orig_w) = image.dims3()?;
    let snap = net.snapshot();
    let run = (|| -> Result<AdaptOutcome> {
        let (views, skipped_scales) =
            augment::build_views(image, &cfg.scales, cfg.use_flip, cfg.use_gray)?;
        let mut opt = Sgd::new(cfg.eta, cfg.momentum_adapt, 0.0)?;
        let mut losses = Vec::new();
        let mut coverage = Vec::new();
        let mut guards = GuardCounts { skipped_scales, ..GuardCounts::default() };
        for _ in 0..cfg.n_iters {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, &cfg.adapt_groups)?;
            let (fused, logit_ids) =
                fused_prediction(net, &mut g, &bind, &views, &san, orig_h, orig_w)?;
            let gt = pseudo::make_pseudo_gt(&fused.probs, cfg.psi)?;
            coverage.push(gt.coverage);
            if gt.coverage == 0.0 {
                guards.skipped_updates += 1;
                continue;
            }
            let loss = iteration_loss(&mut g, &views, &logit_ids, &gt, cfg.loss_on_all_views)?;
            g.backward(loss)?;
            opt.step(net, &g, &bind)?;
            losses.push(g.value(loss).scalar_value()?);
            guards.guard_hits += g.guard_hits();
        }
        finish_report(net, image, &san, losses, coverage, guards, started)
    })();
    net.restore(&snap)?;
    run
}

/// Multi-view fused prediction without parameter updates.
pub fn tta_predict(net: &TinySegNet, image: &Tensor, cfg: &AdaptConfig) -> Result<(U8Tensor, Tensor)> {
    cfg.validate()?;
    let san = cfg.san()?;
    let (_, orig_h, orig_w) = image.dims3()?;
    let (views, _) = augment::build_views(image, &cfg.scales, cfg.use_flip, cfg.use_gray)?;
    let mut g = Graph::new();
    let bind = net.bind(&mut g, &[])?;
    let (fused, _) = fused_prediction(net, &mut g, &bind, &views, &san, orig_h, orig_w)?;
    let mask = pseudo::argmax_labels(&fused.probs)?;
    Ok((mask, fused.probs))
}

/// Entropy-minimization baseline: N_t SGD steps on the mean prediction
/// entropy of the single original-resolution view, updating the same
/// parameter set as `adapt_one`, then reset.
pub fn entropy_adapt(
    net: &mut TinySegNet,
    image: &Tensor,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let san = cfg.san()?;
    let snap = net.snapshot();
    let run = (|| -> Result<AdaptOutcome> {
        let x = image.unsqueeze0();
        let mut opt = Sgd::new(cfg.eta, cfg.momentum_adapt, 0.0)?;
        let mut losses = Vec::new();
        let mut guards = GuardCounts::default();
        for _ in 0..cfg.n_iters {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, &cfg.adapt_groups)?;
            let logits = net.forward_eval(&mut g, &bind, &x, &san)?;
            let loss = g.mean_entropy(logits)?;
            g.backward(loss)?;
            opt.step(net, &g, &bind)?;
            losses.push(g.value(loss).scalar_value()?);
            guards.guard_hits += g.guard_hits();
        }
        finish_report(net, image, &san, losses, Vec::new(), guards, started)
    })();
    net.restore(&snap)?;
    run
}

/// Descent diagnostic: freeze the first iteration's pseudo ground truth and
/// take `steps` SGD updates against it, returning the loss before each
/// update. With a small enough rate the sequence is non-increasing.
pub fn descent_check(
    net: &mut TinySegNet,
    image: &Tensor,
    cfg: &AdaptConfig,
    steps: u32,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let san = cfg.san()?;
    let (_, orig_h, orig_w) = image.dims3()?;
    let snap = net.snapshot();
    let run = (|| -> Result<Vec<f32>> {
        let (views, _) = augment::build_views(image, &cfg.scales, cfg.use_flip, cfg.use_gray)?;
        let gt = {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, &[])?;
            let (fused, _) = fused_prediction(net, &mut g, &bind, &views, &san, orig_h, orig_w)?;
            pseudo::make_pseudo_gt(&fused.probs, cfg.psi)?
        };
        if gt.coverage == 0.0 {
            return Err(Error::contract("frozen pseudo ground truth has no labeled pixels"));
        }
        let x = image.unsqueeze0();
        let mut opt = Sgd::new(cfg.eta, cfg.momentum_adapt, 0.0)?;
        let mut losses = Vec::new();
        for _ in 0..steps {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, &cfg.adapt_groups)?;
            let logits = net.forward_eval(&mut g, &bind, &x, &san)?;
            let loss = g.masked_cross_entropy(logits, &gt.labels)?;
            losses.push(g.value(loss).scalar_value()?);
            g.backward(loss)?;
            opt.step(net, &g, &bind)?;
        }
        Ok(losses)
    })();
    net.restore(&snap)?;
    run
}

/// One line of the evaluation stream. Error entries carry `error` and leave
/// the metric fields empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub method: String,
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub ece: Option<f64>,
    pub coverage: Vec<f32>,
    pub losses: Vec<f32>,
    pub wall_ms: u64,
    pub guards: GuardCounts,
    pub error: Option<String>,
}

/// Pooled result of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub ece: Option<f64>,
    pub n_images: usize,
    pub n_pixels: u64,
    pub method: String,
    pub config_hash: u32,
}

/// Records plus mergeable pooled accumulators for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub records: Vec<SampleRecord>,
    pub confusion: ConfusionMatrix,
    pub calibration: CalibrationHistogram,
    /// Successfully evaluated images.
    pub n_images: usize,
}

impl EvalOutput {
    pub fn aggregate(&self, method: Method, config_hash: u32) -> Aggregate {
        let (per_class, miou) = self.confusion.miou();
        Aggregate {
            miou,
            per_class,
            ece: self.calibration.ece(),
            n_images: self.n_images,
            n_pixels: self.confusion.total(),
            method: method.name().to_string(),
            config_hash,
        }
    }
}

struct SampleEval {
    pred: U8Tensor,
    probs: Tensor,
    coverage: Vec<f32>,
    losses: Vec<f32>,
    guards: GuardCounts,
}

fn run_method(net: &TinySegNet, image: &Tensor, method: Method, cfg: &AdaptConfig) -> Result<SampleEval> {
    let plain = |san: SanConfig| -> Result<SampleEval> {
        let (pred, probs) = plain_predict(net, image, &san)?;
        Ok(SampleEval {
            pred,
            probs,
            coverage: Vec::new(),
            losses: Vec::new(),
            guards: GuardCounts::default(),
        })
    };
    match method {
        Method::Tbn => plain(SanConfig::train_bn()),
        Method::Pbn => plain(SanConfig::pred_bn()),
        Method::San => plain(cfg.san()?),
        Method::Tta => {
            let (pred, probs) = tta_predict(net, image, cfg)?;
            Ok(SampleEval {
                pred,
                probs,
                coverage: Vec::new(),
                losses: Vec::new(),
                guards: GuardCounts::default(),
            })
        }
        Method::Adapt => {
            let mut local = net.clone();
            let out = adapt_one(&mut local, image, cfg)?;
            Ok(SampleEval {
                pred: out.mask,
                probs: out.probs,
                coverage: out.report.coverage,
                losses: out.report.losses,
                guards: out.report.guards,
            })
        }
        Method::Entropy => {
            let mut local = net.clone();
            let out = entropy_adapt(&mut local, image, cfg)?;
            Ok(SampleEval {
                pred: out.mask,
                probs: out.probs,
                coverage: out.report.coverage,
                losses: out.report.losses,
                guards: out.report.guards,
            })
        }
    }
}

/// Evaluates `method` over a manifest. Samples are processed independently
/// (parallel-safe); unreadable or malformed samples become error records and
/// do not contribute to the pooled metrics. Pooled accumulators are merged
/// in manifest order, and integer accumulation makes the pooled result
/// independent of that order.
pub fn evaluate_set(
    net: &TinySegNet,
    manifest_dir: &Path,
    entries: &[ManifestEntry],
    method: Method,
    cfg: &AdaptConfig,
) -> Result<EvalOutput> {
    cfg.validate()?;
    let num_classes = net.num_classes;
    let per_sample = exec::map_indexed(entries.len(), |i| {
        let entry = &entries[i];
        let started = Instant::now();
        let run = (|| -> Result<(SampleRecord, ConfusionMatrix, CalibrationHistogram)> {
            let sample = io::load_sample(manifest_dir, entry)?;
            let eval = run_method(net, &sample.image, method, cfg)?;
            let mut cm = ConfusionMatrix::new(num_classes);
            cm.update(&sample.mask, &eval.pred)?;
            let mut hist = CalibrationHistogram::new();
            hist.observe_image(&eval.probs, &sample.mask)?;
            let (per_class_iou, miou) = cm.miou();
            let record = SampleRecord {
                id: sample.id,
                method: method.name().to_string(),
                miou,
                per_class_iou,
                ece: hist.ece(),
                coverage: eval.coverage,
                losses: eval.losses,
                wall_ms: started.elapsed().as_millis() as u64,
                guards: eval.guards,
                error: None,
            };
            Ok((record, cm, hist))
        })();
        run.unwrap_or_else(|e| {
            let record = SampleRecord {
                id: entry.image.clone(),
                method: method.name().to_string(),
                miou: None,
                per_class_iou: Vec::new(),
                ece: None,
                coverage: Vec::new(),
                losses: Vec::new(),
                wall_ms: started.elapsed().as_millis() as u64,
                guards: GuardCounts::default(),
                error: Some(e.to_string()),
            };
            (record, ConfusionMatrix::new(num_classes), CalibrationHistogram::new())
        })
    });
    let mut confusion = ConfusionMatrix::new(num_classes);
    let mut calibration = CalibrationHistogram::new();
    let mut records = Vec::with_capacity(per_sample.len());
    let mut n_images = 0usize;
    for (record, cm, hist) in per_sample {
        confusion.merge(&cm)?;
        calibration.merge(&hist);
        if record.error.is_none() {
            n_images += 1;
        }
        records.push(record);
    }
    Ok(EvalOutput { records, confusion, calibration, n_images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_manifest, write_tensor, TensorData};
    use crate::rng;
    use rand::Rng;
    use std::path::PathBuf;

    const C: usize = 3;

    fn small_cfg() -> AdaptConfig {
        AdaptConfig {
            scales: vec![0.5, 1.0],
            use_gray: false,
            n_iters: 2,
            eta: 0.01,
            ..AdaptConfig::default()
        }
    }

    fn test_net() -> TinySegNet {
        TinySegNet::new(C, 31)
    }

    fn test_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut r = rng::stream(seed, &[rng::str_tag("adapt-test")]);
        let data = (0..3 * h * w).map(|_| r.gen_range(0.0f32..1.0)).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    fn test_mask(seed: u64, h: usize, w: usize) -> U8Tensor {
        let mut r = rng::stream(seed, &[rng::str_tag("adapt-mask")]);
        let data = (0..h * w).map(|_| r.gen_range(0u8..C as u8)).collect();
        U8Tensor::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn zero_iterations_equal_plain_san_prediction_bitwise() {
        let mut net = test_net();
        let img = test_image(1, 8, 8);
        let cfg = AdaptConfig { n_iters: 0, alpha: 0.3, ..small_cfg() };
        let out = adapt_one(&mut net, &img, &cfg).unwrap();
        let (mask, probs) = plain_predict(&net, &img, &SanConfig::san(0.3).unwrap()).unwrap();
        assert_eq!(out.mask, mask);
        assert_eq!(out.probs.data(), probs.data());
        assert!(out.report.losses.is_empty());
        assert!(out.report.coverage.is_empty());
    }

    #[test]
    fn degenerate_config_reproduces_train_bn_baseline() {
        let mut net = test_net();
        let img = test_image(2, 8, 8);
        let cfg = AdaptConfig {
            alpha: 0.0,
            n_iters: 0,
            scales: vec![1.0],
            use_flip: false,
            use_gray: false,
            ..AdaptConfig::default()
        };
        let out = adapt_one(&mut net, &img, &cfg).unwrap();
        let (tbn_mask, tbn_probs) = plain_predict(&net, &img, &SanConfig::train_bn()).unwrap();
        assert_eq!(out.mask, tbn_mask);
        assert_eq!(out.probs.data(), tbn_probs.data());
        let (tta_mask, _) = tta_predict(&net, &img, &cfg).unwrap();
        assert_eq!(tta_mask, tbn_mask);
    }

    #[test]
    fn adaptation_is_reset_deterministic() {
        let mut net = test_net();
        let img = test_image(3, 8, 8);
        let cfg = small_cfg();
        let before = net.snapshot();
        let a = adapt_one(&mut net, &img, &cfg).unwrap();
        assert!(net.snapshot() == before, "parameters must be restored");
        let b = adapt_one(&mut net, &img, &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.report.losses, b.report.losses);
        assert_eq!(a.report.coverage, b.report.coverage);
    }

    #[test]
    fn no_state_crosses_samples() {
        let img_a = test_image(4, 8, 8);
        let img_b = test_image(5, 8, 8);
        let cfg = small_cfg();
        let mut net = test_net();
        let a_first = adapt_one(&mut net, &img_a, &cfg).unwrap();
        let b_second = adapt_one(&mut net, &img_b, &cfg).unwrap();
        let mut net2 = test_net();
        let b_first = adapt_one(&mut net2, &img_b, &cfg).unwrap();
        let a_second = adapt_one(&mut net2, &img_a, &cfg).unwrap();
        assert_eq!(a_first.mask, a_second.mask);
        assert_eq!(b_first.mask, b_second.mask);
        assert_eq!(a_first.report.losses, a_second.report.losses);
        assert_eq!(b_first.report.losses, b_second.report.losses);
    }

    #[test]
    fn adaptation_updates_change_the_parameters_mid_run() {
        // Losses must be finite and the run must report real iterations.
        let mut net = test_net();
        let img = test_image(6, 8, 8);
        let cfg = AdaptConfig { n_iters: 3, ..small_cfg() };
        let out = adapt_one(&mut net, &img, &cfg).unwrap();
        assert_eq!(out.report.coverage.len(), 3);
        assert_eq!(out.report.losses.len(), 3);
        assert!(out.report.losses.iter().all(|l| l.is_finite()));
        assert!(out.report.coverage.iter().all(|c| *c > 0.0));
        assert!(out.mask.data().iter().all(|&l| (l as usize) < C));
    }

    #[test]
    fn frozen_label_descent_is_non_increasing_at_small_rate() {
        let mut net = test_net();
        let img = test_image(7, 8, 8);
        let cfg = AdaptConfig { eta: 1e-3, ..small_cfg() };
        let losses = descent_check(&mut net, &img, &cfg, 6).unwrap();
        assert_eq!(losses.len(), 6);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn loss_on_all_views_also_descends() {
        let mut net = test_net();
        let img = test_image(8, 8, 8);
        let cfg = AdaptConfig { loss_on_all_views: true, n_iters: 2, ..small_cfg() };
        let out = adapt_one(&mut net, &img, &cfg).unwrap();
        assert_eq!(out.report.losses.len(), 2);
        assert!(out.report.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn tta_with_identity_view_equals_plain_forward() {
        let net = test_net();
        let img = test_image(9, 8, 8);
        let cfg = AdaptConfig {
            scales: vec![1.0],
            use_flip: false,
            use_gray: false,
            alpha: 0.1,
            ..AdaptConfig::default()
        };
        let (tta_mask, tta_probs) = tta_predict(&net, &img, &cfg).unwrap();
        let (mask, probs) = plain_predict(&net, &img, &SanConfig::san(0.1).unwrap()).unwrap();
        assert_eq!(tta_mask, mask);
        assert_eq!(tta_probs.data(), probs.data());
    }

    #[test]
    fn tta_matches_manual_fusion_oracle() {
        let net = test_net();
        let img = test_image(10, 8, 8);
        let cfg = AdaptConfig { alpha: 0.2, ..small_cfg() };
        let (mask, probs) = tta_predict(&net, &img, &cfg).unwrap();
        let san = SanConfig::san(0.2).unwrap();
        let (views, _) = augment::build_views(&img, &cfg.scales, cfg.use_flip, cfg.use_gray).unwrap();
        let aligned: Vec<Tensor> = views
            .iter()
            .map(|v| {
                let logits = net.predict_logits(&v.image, &san).unwrap();
                let p = softmax_of(&logits).unwrap();
                augment::invert_and_align(&v.spec, &p, 8, 8).unwrap()
            })
            .collect();
        let fused = augment::fuse(&aligned).unwrap();
        assert_eq!(probs.data(), fused.probs.data());
        assert_eq!(mask, pseudo::argmax_labels(&fused.probs).unwrap());
    }

    #[test]
    fn entropy_adaptation_runs_and_resets() {
        let mut net = test_net();
        let img = test_image(11, 8, 8);
        let before = net.snapshot();
        let cfg = AdaptConfig { n_iters: 3, eta: 1e-3, ..small_cfg() };
        let out = entropy_adapt(&mut net, &img, &cfg).unwrap();
        assert!(net.snapshot() == before);
        assert_eq!(out.report.losses.len(), 3);
        // Entropy of a C-class prediction cannot exceed ln C.
        for l in &out.report.losses {
            assert!(*l >= 0.0 && *l <= (C as f32).ln() + 1e-5);
        }
        for w in out.report.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-5, "entropy rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn saturated_predictions_leave_entropy_adaptation_inert() {
        let mut net = test_net();
        // Blow up the head so softmax saturates to one-hot everywhere.
        for name in ["head.w", "head.b"] {
            for v in net.param_mut(name).unwrap().data_mut() {
                *v *= 1e4;
            }
        }
        let adapted = net.snapshot();
        let img = test_image(12, 8, 8);
        let cfg = AdaptConfig { n_iters: 2, ..small_cfg() };
        let out = entropy_adapt(&mut net, &img, &cfg).unwrap();
        net.restore(&adapted).unwrap();
        for l in &out.report.losses {
            assert!(*l < 1e-4, "entropy should be near zero, got {l}");
        }
        let (plain_mask, _) = plain_predict(&net, &img, &cfg.san().unwrap()).unwrap();
        assert_eq!(out.mask, plain_mask);
    }

    fn write_dataset(dir: &Path, n: usize) -> Vec<ManifestEntry> {
        let mut entries = Vec::new();
        for i in 0..n {
            let img = test_image(100 + i as u64, 8, 8);
            let mask = test_mask(200 + i as u64, 8, 8);
            let image_rel = format!("img_{i}.sadt");
            let mask_rel = format!("mask_{i}.sadt");
            write_tensor(&dir.join(&image_rel), &TensorData::F32(img)).unwrap();
            write_tensor(&dir.join(&mask_rel), &TensorData::U8(mask)).unwrap();
            entries.push(ManifestEntry {
                image: image_rel,
                mask: mask_rel,
                domain: "test".into(),
                seed: i as u64,
            });
        }
        write_manifest(&dir.join("manifest.jsonl"), &entries).unwrap();
        entries
    }

    #[test]
    fn evaluate_set_is_isolated_and_permutation_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let entries = write_dataset(dir.path(), 3);
        let net = test_net();
        let cfg = AdaptConfig { n_iters: 1, ..small_cfg() };
        let whole = evaluate_set(&net, dir.path(), &entries, Method::Adapt, &cfg).unwrap();
        assert_eq!(whole.n_images, 3);

        let solo = evaluate_set(&net, dir.path(), &entries[1..2], Method::Adapt, &cfg).unwrap();
        let a = &whole.records[1];
        let b = &solo.records[0];
        assert_eq!(a.id, b.id);
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.ece, b.ece);
        assert_eq!(a.losses, b.losses);

        let mut shuffled = entries.clone();
        shuffled.reverse();
        let again = evaluate_set(&net, dir.path(), &shuffled, Method::Adapt, &cfg).unwrap();
        assert_eq!(whole.aggregate(Method::Adapt, 7), again.aggregate(Method::Adapt, 7));
    }

    #[test]
    fn evaluate_set_records_errors_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = write_dataset(dir.path(), 2);
        entries.insert(
            1,
            ManifestEntry {
                image: "missing.sadt".into(),
                mask: "missing_mask.sadt".into(),
                domain: "test".into(),
                seed: 9,
            },
        );
        let net = test_net();
        let out = evaluate_set(&net, dir.path(), &entries, Method::Tbn, &AdaptConfig::default())
            .unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.n_images, 2);
        assert!(out.records[1].error.is_some());
        assert!(out.records[0].error.is_none());
        let agg = out.aggregate(Method::Tbn, 0);
        assert_eq!(agg.n_images, 2);
        assert_eq!(agg.n_pixels, 2 * 64);
        assert_eq!(agg.method, "tbn");
    }

    #[test]
    fn empty_dataset_yields_undefined_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let net = test_net();
        let out =
            evaluate_set(&net, dir.path(), &[], Method::San, &AdaptConfig::default()).unwrap();
        assert!(out.records.is_empty());
        let agg = out.aggregate(Method::San, 1);
        assert_eq!(agg.miou, None);
        assert_eq!(agg.ece, None);
        assert_eq!(agg.n_images, 0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!(Method::parse("magic").is_err());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = AdaptConfig::default();
        cfg.eta = 0.0;
        assert!(cfg.validate().is_err());
        cfg = AdaptConfig { psi: 1.5, ..AdaptConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = AdaptConfig { alpha: -0.1, ..AdaptConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = AdaptConfig { adapt_groups: vec!["block9".into()], ..AdaptConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = AdaptConfig { momentum_adapt: 1.0, ..AdaptConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(AdaptConfig::default().validate().is_ok());
    }

    #[test]
    fn record_json_shape_is_stable() {
        let rec = SampleRecord {
            id: "x".into(),
            method: "san".into(),
            miou: Some(0.5),
            per_class_iou: vec![Some(0.5), None],
            ece: Some(0.25),
            coverage: vec![1.0],
            losses: vec![0.5],
            wall_ms: 3,
            guards: GuardCounts::default(),
            error: None,
        };
        let json = serde_json::to_string(&rec).unwrap();
        let back: SampleRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id, "x");
        assert_eq!(back.per_class_iou, vec![Some(0.5), None]);
        let _path: PathBuf = PathBuf::from("unused");
    }
}
