//! Source-domain training: SGD with polynomial learning-rate decay and the
//! heavy augmentation stack (random resized crops, horizontal flips,
//! photometric jitter, Gaussian blur, random grayscale).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::io::{self, ManifestEntry, Sample};
use crate::kernels;
use crate::model::{TinySegNet, GROUP_NAMES};
use crate::optim::{poly_lr, Sgd};
use crate::rng;
use crate::synth;
use crate::tensor::{Tensor, U8Tensor};

/// Training hyperparameters and augmentation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub poly_power: f32,
    /// Crop area as a fraction of the source image, sampled uniformly.
    pub crop_area: (f32, f32),
    /// Crop aspect ratio range.
    pub aspect: (f32, f32),
    /// Side length crops are resized to; must be a positive multiple of 4.
    pub out_size: usize,
    pub flip_p: f64,
    /// Photometric jitter probability; brightness, contrast, and saturation
    /// factors are drawn from `jitter_range`, the hue factor from
    /// `hue_range` (mapped to a rotation of (factor - 1) * 360 degrees).
    pub jitter_p: f64,
    pub jitter_range: (f32, f32),
    pub hue_range: (f32, f32),
    pub blur_p: f64,
    pub blur_sigma: (f32, f32),
    pub gray_p: f64,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: 12,
            batch_size: 8,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            crop_area: (0.08, 1.0),
            aspect: (0.75, 4.0 / 3.0),
            out_size: synth::CANVAS,
            flip_p: 0.5,
            jitter_p: 0.5,
            jitter_range: (0.7, 1.3),
            hue_range: (0.9, 1.1),
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            gray_p: 0.1,
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f32, f32), min_lo: f32) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo > min_lo && lo <= hi) {
        return Err(Error::contract(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract("weight_decay must be non-negative"));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::contract("poly_power must be positive"));
        }
        check_range("crop_area", self.crop_area, 0.0)?;
        if self.crop_area.1 > 1.0 {
            return Err(Error::contract("crop_area upper bound exceeds 1"));
        }
        check_range("aspect", self.aspect, 0.0)?;
        check_range("jitter", self.jitter_range, 0.0)?;
        check_range("hue", self.hue_range, 0.0)?;
        check_range("blur_sigma", self.blur_sigma, 0.0)?;
        if self.out_size == 0 || self.out_size % 4 != 0 {
            return Err(Error::contract("out_size must be a positive multiple of 4"));
        }
        for p in [self.flip_p, self.jitter_p, self.blur_p, self.gray_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    let mut out = vec![0f32; c * oh * ow];
    kernels::bilinear_forward(t.data(), c, h, w, oh, ow, &mut out);
    Tensor::new(vec![c, oh, ow], out)
}

fn luma_plane(data: &[f32], hw: usize) -> Vec<f32> {
    (0..hw)
        .map(|p| 0.299 * data[p] + 0.587 * data[hw + p] + 0.114 * data[2 * hw + p])
        .collect()
}

fn gaussian_blur(data: &mut Vec<f32>, h: usize, w: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut weights = Vec::with_capacity(2 * radius + 1);
    for d in -(radius as isize)..=radius as isize {
        weights.push((-(d * d) as f32 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = weights.iter().sum();
    for wv in &mut weights {
        *wv /= norm;
    }
    let hw = h * w;
    let channels = data.len() / hw;
    let mut tmp = vec![0f32; data.len()];
    for c in 0..channels {
        let src = &data[c * hw..][..hw];
        let dst = &mut tmp[c * hw..][..hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (i, wv) in weights.iter().enumerate() {
                    let xx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += wv * src[y * w + xx as usize];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    for c in 0..channels {
        let src = &tmp[c * hw..][..hw];
        let dst = &mut data[c * hw..][..hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (i, wv) in weights.iter().enumerate() {
                    let yy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += wv * src[yy as usize * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
}

/// One augmented training example; the mask goes through the same geometry
/// (nearest-neighbor) and none of the photometry.
pub fn augment_sample(
    image: &Tensor,
    mask: &U8Tensor,
    recipe: &TrainRecipe,
    r: &mut ChaCha8Rng,
) -> Result<(Tensor, U8Tensor)> {
    let (_, h, w) = image.dims3()?;

    // Random resized crop: area fraction and aspect ratio, clamped to fit.
    let area = r.gen_range(recipe.crop_area.0..=recipe.crop_area.1) * (h * w) as f32;
    let ratio = r.gen_range(recipe.aspect.0..=recipe.aspect.1);
    let cw = ((area * ratio).sqrt().round() as usize).clamp(4, w);
    let ch = ((area / ratio).sqrt().round() as usize).clamp(4, h);
    let top = r.gen_range(0..=h - ch);
    let left = r.gen_range(0..=w - cw);
    let mut img = image.crop3(top, left, ch, cw)?;
    let mut msk = mask.crop2(top, left, ch, cw)?;
    img = resize_bilinear(&img, recipe.out_size, recipe.out_size)?;
    msk = msk.resize_nearest(recipe.out_size, recipe.out_size)?;

    if r.gen_bool(recipe.flip_p) {
        img = img.hflip();
        msk = msk.hflip();
    }

    let hw = recipe.out_size * recipe.out_size;
    let mut data = img.data().to_vec();
    if r.gen_bool(recipe.jitter_p) {
        let f = |r: &mut ChaCha8Rng| r.gen_range(recipe.jitter_range.0..=recipe.jitter_range.1);
        let (fb, fc, fs) = (f(r), f(r), f(r));
        let fh = r.gen_range(recipe.hue_range.0..=recipe.hue_range.1);
        for v in &mut data {
            *v *= fb;
        }
        let mean: f32 = luma_plane(&data, hw).iter().sum::<f32>() / hw as f32;
        for v in &mut data {
            *v = (*v - mean) * fc + mean;
        }
        let luma = luma_plane(&data, hw);
        for c in 0..3 {
            for p in 0..hw {
                let v = &mut data[c * hw + p];
                *v = (*v - luma[p]) * fs + luma[p];
            }
        }
        let m = synth::hue_rotation_matrix((fh - 1.0) * 360.0);
        for p in 0..hw {
            let px = [data[p], data[hw + p], data[2 * hw + p]];
            for c in 0..3 {
                data[c * hw + p] = m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2];
            }
        }
    }
    if r.gen_bool(recipe.blur_p) {
        let sigma = r.gen_range(recipe.blur_sigma.0..=recipe.blur_sigma.1);
        gaussian_blur(&mut data, recipe.out_size, recipe.out_size, sigma);
    }
    if r.gen_bool(recipe.gray_p) {
        let luma = luma_plane(&data, hw);
        for c in 0..3 {
            data[c * hw..][..hw].copy_from_slice(&luma);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    let img = Tensor::new(vec![3, recipe.out_size, recipe.out_size], data)?;
    Ok((img, msk))
}

/// Per-step losses and schedule bookkeeping from one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub losses: Vec<f32>,
    pub steps: u32,
    pub epochs: u32,
}

/// Trains `net` in place on the manifest samples. Deterministic in
/// `recipe.seed`; augmentation streams are keyed per (epoch, position), so
/// batch assembly parallelism cannot change the result.
pub fn train_source(
    net: &mut TinySegNet,
    manifest_dir: &Path,
    entries: &[ManifestEntry],
    recipe: &TrainRecipe,
) -> Result<TrainStats> {
    recipe.validate()?;
    if entries.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    let samples: Vec<Sample> = entries
        .iter()
        .map(|e| io::load_sample(manifest_dir, e))
        .collect::<Result<Vec<_>>>()?;

    let all_groups: Vec<String> = GROUP_NAMES.iter().map(|s| s.to_string()).collect();
    let mut opt = Sgd::new(recipe.base_lr, recipe.momentum, recipe.weight_decay)?;
    let steps_per_epoch = samples.len().div_ceil(recipe.batch_size) as u32;
    let total_steps = recipe.epochs * steps_per_epoch;
    let mut losses = Vec::with_capacity(total_steps as usize);
    let mut step = 0u32;

    for epoch in 0..recipe.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            rng::stream(recipe.seed, &[rng::str_tag("shuffle"), epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        for (bi, batch) in order.chunks(recipe.batch_size).enumerate() {
            let augmented = exec::map_indexed(batch.len(), |k| {
                let s = &samples[batch[k]];
                let mut r = rng::stream(
                    recipe.seed,
                    &[rng::str_tag("augment"), epoch as u64, (bi * recipe.batch_size + k) as u64],
                );
                augment_sample(&s.image, &s.mask, recipe, &mut r)
            });
            let mut images = Vec::with_capacity(batch.len());
            let mut label_data = Vec::with_capacity(batch.len() * recipe.out_size * recipe.out_size);
            for a in augmented {
                let (img, msk) = a?;
                images.push(img);
                label_data.extend_from_slice(msk.data());
            }
            let x = Tensor::stack(&images)?;
            let labels = U8Tensor::new(
                vec![batch.len(), recipe.out_size, recipe.out_size],
                label_data,
            )?;

            opt.set_lr(poly_lr(recipe.base_lr, step as usize, total_steps as usize, recipe.poly_power))?;
            let mut g = crate::graph::Graph::new();
            let bind = net.bind(&mut g, &all_groups)?;
            let logits = net.forward_train(&mut g, &bind, &x)?;
            let loss = g.masked_cross_entropy(logits, &labels)?;
            let loss_v = g.value(loss).scalar_value()?;
            // stabilized log-sum-exp keeps exploding losses finite, so an
            // absolute bound is needed alongside the NaN check; healthy
            // runs start near ln(C) and never approach it
            if !loss_v.is_finite() || loss_v > 1e4 {
                return Err(Error::Training(format!(
                    "loss diverged to {loss_v} at epoch {epoch} step {step} (lr {})",
                    opt.lr()
                )));
            }
            g.backward(loss)?;
            opt.step(net, &g, &bind)?;
            losses.push(loss_v);
            step += 1;
        }
    }
    // a blow-up on the final step would otherwise escape the loss check
    // above and be serialized into the checkpoint
    for (name, t) in net.named_params() {
        if !t.all_finite() {
            return Err(Error::Training(format!(
                "parameter {name} diverged (non-finite values after training)"
            )));
        }
    }
    Ok(TrainStats { losses, steps: step, epochs: recipe.epochs })
}
