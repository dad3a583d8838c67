//! A small fully-convolutional segmentation network with named layer
//! groups, so adaptation can select which slice of the network to update.
//!
//! stem    conv3x3  3->16            H
//! block2  conv3x3 16->32, stride 2  H/2
//! block3  conv3x3 32->32            H/2
//! block4  conv3x3 32->64, stride 2  H/4
//! block5  conv3x3 64->64            H/4
//! head    conv1x1 64->C, bilinear x4 back to H
//!
//! Every conv block is conv + BN + ReLU. Parameters partition exactly into
//! the six groups; each group's trainables are the conv weight/bias plus
//! the BN affine pair (the head has no BN).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::norm::{BatchNorm, NormStats, SanConfig};
use crate::rng;
use crate::tensor::Tensor;

pub const GROUP_NAMES: [&str; 6] = ["stem", "block2", "block3", "block4", "block5", "head"];
pub const DEFAULT_ADAPT_GROUPS: [&str; 3] = ["block4", "block5", "head"];
pub const DEFAULT_NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
struct ConvBn {
    w: Tensor,
    b: Tensor,
    bn: BatchNorm,
    stride: usize,
}

impl ConvBn {
    fn new(ic: usize, oc: usize, k: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        ConvBn {
            w: he_init(oc, ic, k, rng),
            b: Tensor::zeros(&[oc]),
            bn: BatchNorm::new(oc),
            stride,
        }
    }
}

fn he_init(oc: usize, ic: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let fan_in = (ic * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..oc * ic * k * k).map(|_| std * rng::normal(rng)).collect();
    Tensor::new(vec![oc, ic, k, k], data).expect("init shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinySegNet {
    pub num_classes: usize,
    stem: ConvBn,
    block2: ConvBn,
    block3: ConvBn,
    block4: ConvBn,
    block5: ConvBn,
    head_w: Tensor,
    head_b: Tensor,
}

/// Graph leaves for every parameter of one forward pass. Binding the
/// parameters once per graph lets several view forwards share them, so
/// their gradients accumulate across views.
pub struct ParamBinding {
    ids: Vec<(String, NodeId)>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

impl TinySegNet {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mk = |name: &str, ic: usize, oc: usize, stride: usize| {
            let mut r = rng::stream(seed, &[rng::str_tag("init"), rng::str_tag(name)]);
            ConvBn::new(ic, oc, 3, stride, &mut r)
        };
        let mut hr = rng::stream(seed, &[rng::str_tag("init"), rng::str_tag("head")]);
        TinySegNet {
            num_classes,
            stem: mk("stem", 3, 16, 1),
            block2: mk("block2", 16, 32, 2),
            block3: mk("block3", 32, 32, 1),
            block4: mk("block4", 32, 64, 2),
            block5: mk("block5", 64, 64, 1),
            head_w: he_init(num_classes, 64, 1, &mut hr),
            head_b: Tensor::zeros(&[num_classes]),
        }
    }

    fn blocks(&self) -> [(&'static str, &ConvBn); 5] {
        [
            ("stem", &self.stem),
            ("block2", &self.block2),
            ("block3", &self.block3),
            ("block4", &self.block4),
            ("block5", &self.block5),
        ]
    }

    fn block_mut(&mut self, name: &str) -> &mut ConvBn {
        match name {
            "stem" => &mut self.stem,
            "block2" => &mut self.block2,
            "block3" => &mut self.block3,
            "block4" => &mut self.block4,
            "block5" => &mut self.block5,
            other => panic!("no such block {other}"),
        }
    }

    pub fn validate_groups(groups: &[String]) -> Result<()> {
        for g in groups {
            if !GROUP_NAMES.contains(&g.as_str()) {
                return Err(Error::contract(format!(
                    "unknown layer group '{g}' (valid: {})",
                    GROUP_NAMES.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Parameter names of the given groups, in network order.
    pub fn select_params(&self, groups: &[String]) -> Result<Vec<String>> {
        Self::validate_groups(groups)?;
        let mut names = Vec::new();
        for g in GROUP_NAMES {
            if !groups.iter().any(|x| x == g) {
                continue;
            }
            if g == "head" {
                names.push("head.w".to_string());
                names.push("head.b".to_string());
            } else {
                for suffix in ["conv.w", "conv.b", "bn.gamma", "bn.beta"] {
                    names.push(format!("{g}.{suffix}"));
                }
            }
        }
        Ok(names)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, blk) in self.blocks() {
            out.push((format!("{name}.conv.w"), &blk.w));
            out.push((format!("{name}.conv.b"), &blk.b));
            out.push((format!("{name}.bn.gamma"), &blk.bn.gamma));
            out.push((format!("{name}.bn.beta"), &blk.bn.beta));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let missing = || Error::contract(format!("no parameter named '{name}'"));
        if name == "head.w" {
            return Ok(&mut self.head_w);
        }
        if name == "head.b" {
            return Ok(&mut self.head_b);
        }
        let (group, rest) = name.split_once('.').ok_or_else(missing)?;
        if !GROUP_NAMES[..5].contains(&group) {
            return Err(missing());
        }
        let blk = self.block_mut(group);
        match rest {
            "conv.w" => Ok(&mut blk.w),
            "conv.b" => Ok(&mut blk.b),
            "bn.gamma" => Ok(&mut blk.bn.gamma),
            "bn.beta" => Ok(&mut blk.bn.beta),
            _ => Err(missing()),
        }
    }

    /// Running statistics by name ("<group>.bn.mean" / ".var").
    pub fn named_stats(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, blk) in self.blocks() {
            out.push((format!("{name}.bn.mean"), blk.bn.running.mean.clone()));
            out.push((format!("{name}.bn.var"), blk.bn.running.var.clone()));
        }
        out
    }

    pub fn set_stat(&mut self, name: &str, values: Vec<f32>) -> Result<()> {
        let missing = || Error::contract(format!("no statistic named '{name}'"));
        let (group, rest) = name.split_once('.').ok_or_else(missing)?;
        if !GROUP_NAMES[..5].contains(&group) {
            return Err(missing());
        }
        let blk = self.block_mut(group);
        if values.len() != blk.bn.channels() {
            return Err(Error::shape(format!(
                "statistic '{name}' wants {} values, got {}",
                blk.bn.channels(),
                values.len()
            )));
        }
        match rest {
            "bn.mean" => blk.bn.running.mean = values,
            "bn.var" => blk.bn.running.var = values,
            _ => return Err(missing()),
        }
        Ok(())
    }

    /// Create graph leaves for all parameters; those in `trainable_groups`
    /// are gradient-tracked.
    pub fn bind(&self, g: &mut Graph, trainable_groups: &[String]) -> Result<ParamBinding> {
        Self::validate_groups(trainable_groups)?;
        let trainable: Vec<String> = self.select_params(trainable_groups)?;
        self.bind_names(g, &trainable)
    }

    /// Like `bind`, but gradient-tracks an explicit parameter name list.
    pub fn bind_names(&self, g: &mut Graph, trainable: &[String]) -> Result<ParamBinding> {
        let params = self.named_params();
        for want in trainable {
            if !params.iter().any(|(name, _)| name == want) {
                return Err(Error::contract(format!("no parameter named '{want}'")));
            }
        }
        let mut ids = Vec::new();
        for (name, t) in params {
            let track = trainable.iter().any(|x| *x == name);
            ids.push((name, g.leaf(t.clone(), track)));
        }
        Ok(ParamBinding { ids })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("input wants 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("input extents {h}x{w} must be positive multiples of 4")));
        }
        Ok((n, c, h, w))
    }

    /// Inference forward; normalization statistics follow `cfg`.
    pub fn forward_eval(&self, g: &mut Graph, bind: &ParamBinding, x: &Tensor, cfg: &SanConfig) -> Result<NodeId> {
        let (_, _, h, w) = self.check_input(x)?;
        let alpha = cfg.effective_alpha();
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let mut cur = g.leaf(x.clone(), false);
        for (name, blk) in self.blocks() {
            let y = g.conv2d(cur, bind.id(&format!("{name}.conv.w")), bind.id(&format!("{name}.conv.b")), blk.stride, 1)?;
            let n = blk.bn.forward_eval(g, y, bind.id(&format!("{name}.bn.gamma")), bind.id(&format!("{name}.bn.beta")), alpha)?;
            cur = g.relu(n);
        }
        let logits = g.conv2d(cur, bind.id("head.w"), bind.id("head.b"), 1, 0)?;
        g.bilinear(logits, h, w)
    }

    /// Training forward: batch-stat normalization, running stats updated.
    pub fn forward_train(&mut self, g: &mut Graph, bind: &ParamBinding, x: &Tensor) -> Result<NodeId> {
        let (_, _, h, w) = self.check_input(x)?;
        let mut cur = g.leaf(x.clone(), false);
        for name in ["stem", "block2", "block3", "block4", "block5"] {
            let (stride, gamma, beta, wid, bid) = {
                let blk = self.block_mut(name);
                (
                    blk.stride,
                    bind.id(&format!("{name}.bn.gamma")),
                    bind.id(&format!("{name}.bn.beta")),
                    bind.id(&format!("{name}.conv.w")),
                    bind.id(&format!("{name}.conv.b")),
                )
            };
            let y = g.conv2d(cur, wid, bid, stride, 1)?;
            let n = self.block_mut(name).bn.forward_train(g, y, gamma, beta)?;
            cur = g.relu(n);
        }
        let logits = g.conv2d(cur, bind.id("head.w"), bind.id("head.b"), 1, 0)?;
        g.bilinear(logits, h, w)
    }

    /// Full bitwise copy of parameters and running statistics.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            num_classes: self.num_classes,
            params: self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            stats: self.named_stats(),
        }
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.num_classes != self.num_classes {
            return Err(Error::contract(format!(
                "snapshot has {} classes, net has {}",
                snap.num_classes, self.num_classes
            )));
        }
        for (name, t) in &snap.params {
            let dst = self.param_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::contract(format!("snapshot shape mismatch for '{name}'")));
            }
            *dst = t.clone();
        }
        for (name, v) in &snap.stats {
            self.set_stat(name, v.clone())?;
        }
        Ok(())
    }

    /// Convenience: single-image logits without gradient tracking.
    pub fn predict_logits(&self, image: &Tensor, cfg: &SanConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, &[])?;
        let x = if image.shape().len() == 3 { image.unsqueeze0() } else { image.clone() };
        let id = self.forward_eval(&mut g, &bind, &x, cfg)?;
        Ok(g.value(id).clone())
    }

    pub fn running_stats(&self, group: &str) -> Option<&NormStats> {
        self.blocks()
            .into_iter()
            .find(|(n, _)| *n == group)
            .map(|(_, b)| &b.bn.running)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    num_classes: usize,
    params: Vec<(String, Tensor)>,
    stats: Vec<(String, Vec<f32>)>,
}
