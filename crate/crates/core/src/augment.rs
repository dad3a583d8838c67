//! Multi-view test-time augmentation: view construction, inverse alignment,
//! and probability-map fusion.
//!
//! A view is the input image at some scale, optionally mirrored and/or
//! grayscaled. Predictions made on a view are mapped back to the original
//! frame by undoing the mirror and resizing the softmax map bilinearly;
//! grayscale has no spatial inverse. Fusion is the per-element mean over
//! aligned maps.

use crate::error::{Error, Result};
use crate::exec;
use crate::kernels;
use crate::tensor::Tensor;

/// Smallest admissible spatial extent for a view (model stride constraint).
pub const MIN_EXTENT: usize = 4;

/// One augmentation: a scale factor plus mirror/grayscale switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSpec {
    pub scale: f32,
    pub flipped: bool,
    pub grayscaled: bool,
}

impl ViewSpec {
    pub fn identity() -> Self {
        ViewSpec { scale: 1.0, flipped: false, grayscaled: false }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && !self.flipped && !self.grayscaled
    }
}

/// A view spec together with the transformed image (3 x h x w).
#[derive(Debug, Clone)]
pub struct View {
    pub spec: ViewSpec,
    pub image: Tensor,
}

/// Mean of the aligned per-view softmax maps (C x H x W at original extents).
#[derive(Debug, Clone)]
pub struct FusedProbMap {
    pub probs: Tensor,
    pub view_count: usize,
}

/// Scaled extent rounded to the nearest multiple of 4. May round to 0 for
/// very small products; callers treat anything below MIN_EXTENT as unusable.
pub fn scaled_extent(extent: usize, scale: f32) -> usize {
    (extent as f32 * scale / 4.0).round() as usize * 4
}

/// Target extents of a view at `scale` for an H x W input.
pub fn view_extents(h: usize, w: usize, scale: f32) -> (usize, usize) {
    (scaled_extent(h, scale), scaled_extent(w, scale))
}

fn resize_planes(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == oh && w == ow {
        return Ok(x.clone());
    }
    let mut out = vec![0.0f32; c * oh * ow];
    kernels::bilinear_forward(x.data(), c, h, w, oh, ow, &mut out);
    Tensor::new(vec![c, oh, ow], out)
}

/// Normalized scale list: sorted ascending, exact duplicates removed, 1.0
/// always present so the fused map is anchored at the original resolution.
fn normalize_scales(scales: &[f32]) -> Result<Vec<f32>> {
    let mut out: Vec<f32> = Vec::with_capacity(scales.len() + 1);
    for &s in scales {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::contract(format!("view scale must be positive and finite, got {s}")));
        }
        out.push(s);
    }
    if !out.contains(&1.0) {
        out.push(1.0);
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup();
    Ok(out)
}

/// Builds the augmented view batch for one image (3 x H x W, pixels in [0,1]).
///
/// View order is deterministic: scale ascending, then mirror, then grayscale.
/// Scales whose rounded extent falls below MIN_EXTENT are dropped; the count
/// of dropped scales is returned alongside the views.
pub fn build_views(
    image: &Tensor,
    scales: &[f32],
    use_flip: bool,
    use_gray: bool,
) -> Result<(Vec<View>, u32)> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c} channels")));
    }
    let mut views = Vec::new();
    let mut skipped = 0u32;
    for s in normalize_scales(scales)? {
        let (sh, sw) = view_extents(h, w, s);
        if sh < MIN_EXTENT || sw < MIN_EXTENT {
            log::warn!("skipping view scale {s}: extent {sh}x{sw} below minimum {MIN_EXTENT}");
            skipped += 1;
            continue;
        }
        let base = resize_planes(image, sh, sw)?;
        let flips: &[bool] = if use_flip { &[false, true] } else { &[false] };
        let grays: &[bool] = if use_gray { &[false, true] } else { &[false] };
        for &flipped in flips {
            let mirrored = if flipped { base.hflip() } else { base.clone() };
            for &grayscaled in grays {
                let img = if grayscaled { mirrored.grayscale()? } else { mirrored.clone() };
                views.push(View { spec: ViewSpec { scale: s, flipped, grayscaled }, image: img });
            }
        }
    }
    Ok((views, skipped))
}

/// Applies the full view transform (resize, mirror, grayscale) to an image.
pub fn transform_image(spec: &ViewSpec, image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c} channels")));
    }
    let (sh, sw) = view_extents(h, w, spec.scale);
    if sh < MIN_EXTENT || sw < MIN_EXTENT {
        return Err(Error::contract(format!(
            "view scale {} yields extent {sh}x{sw} below minimum {MIN_EXTENT}",
            spec.scale
        )));
    }
    let mut out = resize_planes(image, sh, sw)?;
    if spec.flipped {
        out = out.hflip();
    }
    if spec.grayscaled {
        out = out.grayscale()?;
    }
    Ok(out)
}

/// Applies only the spatial part of the view transform (resize, mirror) to a
/// map of any channel count. Grayscale acts on input colors, not predictions,
/// so it has no counterpart here.
pub fn transform_map(spec: &ViewSpec, map: &Tensor) -> Result<Tensor> {
    let (_, h, w) = map.dims3()?;
    let (sh, sw) = view_extents(h, w, spec.scale);
    if sh < MIN_EXTENT || sw < MIN_EXTENT {
        return Err(Error::contract(format!(
            "view scale {} yields extent {sh}x{sw} below minimum {MIN_EXTENT}",
            spec.scale
        )));
    }
    let mut out = resize_planes(map, sh, sw)?;
    if spec.flipped {
        out = out.hflip();
    }
    Ok(out)
}

/// Maps a per-view prediction (C x h x w) back to the original frame: undo
/// the mirror in view space, then resize bilinearly to (orig_h, orig_w).
pub fn invert_and_align(
    spec: &ViewSpec,
    probs: &Tensor,
    orig_h: usize,
    orig_w: usize,
) -> Result<Tensor> {
    probs.dims3()?;
    let unflipped = if spec.flipped { probs.hflip() } else { probs.clone() };
    resize_planes(&unflipped, orig_h, orig_w)
}

/// Per-element mean over aligned maps, accumulated in fixed view order.
pub fn fuse(aligned: &[Tensor]) -> Result<FusedProbMap> {
    let first = aligned
        .first()
        .ok_or_else(|| Error::contract("fuse requires at least one aligned map"))?;
    let shape = first.shape().to_vec();
    for (i, m) in aligned.iter().enumerate() {
        if m.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "aligned map {i} has shape {:?}, expected {:?}",
                m.shape(),
                shape
            )));
        }
    }
    let n = aligned.len();
    let inv = 1.0f32 / n as f32;
    let data = exec::map_indexed(first.len(), |i| {
        let mut acc = 0.0f32;
        for m in aligned {
            acc += m.data()[i];
        }
        acc * inv
    });
    Ok(FusedProbMap { probs: Tensor::new(shape, data)?, view_count: n })
}
