//! Procedural segmentation benchmark with a controllable covariate shift.
//!
//! Scenes are 64x64 canvases with 2 to 5 analytic shapes (disk, rectangle,
//! triangle, stripe) drawn in painter's order over a background, each class
//! with its own base color. Masks are exact by construction. A `ShiftSpec`
//! then perturbs the image (never the mask): brightness, contrast, a
//! luminance-preserving hue rotation, additive noise, and box blur, all
//! scaled by a single strength knob. Every random choice is keyed by
//! (seed, split, index), so generation is order-independent and parallel.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::io::{self, ManifestEntry, TensorData};
use crate::rng;
use crate::tensor::{Tensor, U8Tensor};

pub const CANVAS: usize = 64;
pub const NUM_CLASSES: usize = 5;

/// Base colors, indexed by class: background, disk, rectangle, triangle,
/// stripe. Kept away from [0,1] edges so lighting and jitter cannot clip.
pub const CLASS_COLORS: [[f32; 3]; NUM_CLASSES] = [
    [0.36, 0.44, 0.36],
    [0.72, 0.24, 0.24],
    [0.24, 0.34, 0.72],
    [0.76, 0.68, 0.24],
    [0.54, 0.26, 0.62],
];

/// Dataset splits. The validation domain sits at an intermediate shift so
/// hyperparameters can be chosen without touching any target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Source,
    Val,
    TargetA,
    TargetB,
    TargetC,
}

impl Split {
    pub const ALL: [Split; 5] =
        [Split::Source, Split::Val, Split::TargetA, Split::TargetB, Split::TargetC];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Val => "val",
            Split::TargetA => "targetA",
            Split::TargetB => "targetB",
            Split::TargetC => "targetC",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown split '{s}'")))
    }

    /// The shift applied to this split's images. Targets alternate hue sign
    /// so they are not a single one-parameter family.
    pub fn shift(&self) -> ShiftSpec {
        let (s, hue_sign) = match self {
            Split::Source => (0.0, 1.0),
            Split::Val => (0.35, 1.0),
            Split::TargetA => (0.5, 1.0),
            Split::TargetB => (0.7, -1.0),
            Split::TargetC => (0.9, 1.0),
        };
        ShiftSpec::new(s, hue_sign).expect("built-in shifts are valid")
    }

    pub fn is_target(&self) -> bool {
        matches!(self, Split::TargetA | Split::TargetB | Split::TargetC)
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Photometric corruption of strength `s`; `s = 0` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub strength: f32,
    /// Direction of the hue rotation, +1 or -1.
    pub hue_sign: f32,
}

impl ShiftSpec {
    pub fn new(strength: f32, hue_sign: f32) -> Result<ShiftSpec> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::contract(format!("shift strength must lie in [0,1], got {strength}")));
        }
        if hue_sign != 1.0 && hue_sign != -1.0 {
            return Err(Error::contract(format!("hue sign must be +1 or -1, got {hue_sign}")));
        }
        Ok(ShiftSpec { strength, hue_sign })
    }

    pub fn brightness_offset(&self) -> f32 {
        0.25 * self.strength
    }

    pub fn contrast_factor(&self) -> f32 {
        1.0 + 0.6 * self.strength
    }

    pub fn hue_degrees(&self) -> f32 {
        30.0 * self.strength * self.hue_sign
    }

    /// Noise is nominally 0.02 + 0.06s, but s = 0 must be the identity, so
    /// the noise stage is skipped entirely there.
    pub fn noise_sigma(&self) -> f32 {
        if self.strength == 0.0 {
            0.0
        } else {
            0.02 + 0.06 * self.strength
        }
    }

    pub fn blur_radius(&self) -> usize {
        (2.0 * self.strength).round() as usize
    }

    /// Applies the shift stages in order: brightness, contrast, hue, noise,
    /// blur, then a final clamp to [0,1]. The mask is never touched.
    pub fn apply(&self, image: &Tensor, r: &mut ChaCha8Rng) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape("shift expects a 3-channel image"));
        }
        if self.strength == 0.0 {
            return Ok(image.clone());
        }
        let mut data = image.data().to_vec();
        let beta = self.brightness_offset();
        let gamma = self.contrast_factor();
        for v in &mut data {
            *v = (*v + beta - 0.5) * gamma + 0.5;
        }
        let m = hue_rotation_matrix(self.hue_degrees());
        let hw = h * w;
        for p in 0..hw {
            let px = [data[p], data[hw + p], data[2 * hw + p]];
            for ch in 0..3 {
                data[ch * hw + p] = m[ch][0] * px[0] + m[ch][1] * px[1] + m[ch][2] * px[2];
            }
        }
        let sigma = self.noise_sigma();
        for v in &mut data {
            *v += sigma * rng::normal(r);
        }
        let radius = self.blur_radius();
        if radius > 0 {
            data = box_blur(&data, h, w, radius);
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![3, h, w], data)
    }
}

/// Rotation about the luma axis, built in YIQ space so NTSC luminance
/// (0.299, 0.587, 0.114) is preserved exactly.
pub fn hue_rotation_matrix(degrees: f32) -> [[f32; 3]; 3] {
    const TO_YIQ: [[f64; 3]; 3] = [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ];
    let from_yiq = invert3(&TO_YIQ);
    let t = (degrees as f64).to_radians();
    let (sin, cos) = t.sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]];
    let mut rt = [[0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rt[i][j] = (0..3).map(|k| rot[i][k] * TO_YIQ[k][j]).sum();
        }
    }
    let mut m = [[0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| from_yiq[i][k] * rt[k][j]).sum::<f64>() as f32;
        }
    }
    m
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, d) = ((j + 1) % 3, (j + 2) % 3);
            // Adjugate: cofactor of (i,j), transposed.
            inv[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

/// Mean filter of window (2r+1)^2 per channel with replicated borders,
/// applied as two separable passes.
pub fn box_blur(data: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let hw = h * w;
    let channels = data.len() / hw;
    let k = (2 * radius + 1) as f32;
    let mut tmp = vec![0f32; data.len()];
    for c in 0..channels {
        let src = &data[c * hw..][..hw];
        let dst = &mut tmp[c * hw..][..hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for d in -(radius as isize)..=radius as isize {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += src[y * w + xx];
                }
                dst[y * w + x] = acc / k;
            }
        }
    }
    let mut out = vec![0f32; data.len()];
    for c in 0..channels {
        let src = &tmp[c * hw..][..hw];
        let dst = &mut out[c * hw..][..hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for d in -(radius as isize)..=radius as isize {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += src[yy * w + x];
                }
                dst[y * w + x] = acc / k;
            }
        }
    }
    out
}

/// Analytic shape with an exact membership test; pixel (row, col) is probed
/// at its center (col + 0.5, row + 0.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Triangle { a: (f32, f32), b: (f32, f32), c: (f32, f32) },
    Stripe { ax: f32, ay: f32, nx: f32, ny: f32, half_width: f32 },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match self {
            Shape::Disk { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Triangle { .. } => 3,
            Shape::Stripe { .. } => 4,
        }
    }

    pub fn covers(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { a, b, c } => {
                // Inside iff all edge cross products share the triangle's
                // orientation sign (boundary counts as inside).
                let e = |p: (f32, f32), q: (f32, f32)| {
                    (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
                };
                let (d0, d1, d2) = (e(a, b), e(b, c), e(c, a));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Stripe { ax, ay, nx, ny, half_width } => {
                ((x - ax) * nx + (y - ay) * ny).abs() <= half_width
            }
        }
    }
}

/// One object: a shape plus its jittered draw color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [f32; 3],
}

/// A fully specified scene; rendering it is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Painter's order: later objects draw over earlier ones.
    pub objects: Vec<SceneObject>,
    pub bg_color: [f32; 3],
    /// Linear lighting ramp: unit direction and relative amplitude.
    pub light_dir: (f32, f32),
    pub light_amp: f32,
}

fn jitter_color(base: [f32; 3], r: &mut ChaCha8Rng, amount: f32) -> [f32; 3] {
    let mut c = base;
    for v in &mut c {
        *v += r.gen_range(-amount..=amount);
    }
    c
}

fn sample_shape(r: &mut ChaCha8Rng) -> Shape {
    match r.gen_range(0u8..4) {
        0 => Shape::Disk {
            cx: r.gen_range(10.0..54.0),
            cy: r.gen_range(10.0..54.0),
            r: r.gen_range(5.0..14.0),
        },
        1 => {
            let w = r.gen_range(10.0..28.0);
            let h = r.gen_range(10.0..28.0);
            let x0 = r.gen_range(2.0..62.0 - w);
            let y0 = r.gen_range(2.0..62.0 - h);
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        2 => loop {
            let a = (r.gen_range(4.0..60.0), r.gen_range(4.0..60.0));
            let b = (r.gen_range(4.0..60.0), r.gen_range(4.0..60.0));
            let c = (r.gen_range(4.0..60.0), r.gen_range(4.0..60.0));
            let cross: f32 = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            // Twice the area; reject slivers below 80 px^2.
            if cross.abs() >= 160.0 {
                break Shape::Triangle { a, b, c };
            }
        },
        _ => {
            let angle = r.gen_range(0.0..std::f32::consts::PI);
            Shape::Stripe {
                ax: r.gen_range(20.0..44.0),
                ay: r.gen_range(20.0..44.0),
                nx: angle.cos(),
                ny: angle.sin(),
                half_width: r.gen_range(3.0..7.0),
            }
        }
    }
}

impl Scene {
    /// Samples a scene from the per-image stream.
    pub fn sample(image_seed: u64) -> Scene {
        let mut r = rng::stream(image_seed, &[rng::str_tag("scene")]);
        let bg_color = jitter_color(CLASS_COLORS[0], &mut r, 0.04);
        let phi = r.gen_range(0.0..std::f32::consts::TAU);
        let light_dir = (phi.cos(), phi.sin());
        let light_amp = r.gen_range(0.0..0.1);
        let n_obj = r.gen_range(2usize..=5);
        let objects = (0..n_obj)
            .map(|_| {
                let shape = sample_shape(&mut r);
                let color = jitter_color(CLASS_COLORS[shape.class() as usize], &mut r, 0.05);
                SceneObject { shape, color }
            })
            .collect();
        Scene { objects, bg_color, light_dir, light_amp }
    }

    /// Topmost object covering the pixel center, if any.
    pub fn top_object_at(&self, x: f32, y: f32) -> Option<&SceneObject> {
        self.objects.iter().rev().find(|o| o.shape.covers(x, y))
    }

    /// Renders the clean image (3xHxW) and its exact mask (HxW).
    pub fn render(&self) -> (Tensor, U8Tensor) {
        let hw = CANVAS * CANVAS;
        let mut img = vec![0f32; 3 * hw];
        let mut mask = vec![0u8; hw];
        for row in 0..CANVAS {
            for col in 0..CANVAS {
                let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
                let (color, class) = match self.top_object_at(x, y) {
                    Some(o) => (o.color, o.shape.class()),
                    None => (self.bg_color, 0),
                };
                let nx = x / CANVAS as f32 - 0.5;
                let ny = y / CANVAS as f32 - 0.5;
                let light =
                    1.0 + self.light_amp * (nx * self.light_dir.0 + ny * self.light_dir.1);
                let p = row * CANVAS + col;
                for ch in 0..3 {
                    img[ch * hw + p] = (color[ch] * light).clamp(0.0, 1.0);
                }
                mask[p] = class;
            }
        }
        let image = Tensor::new(vec![3, CANVAS, CANVAS], img).expect("render shape");
        let mask = U8Tensor::new(vec![CANVAS, CANVAS], mask).expect("render shape");
        (image, mask)
    }
}

/// Per-image key; everything about image `index` of a split derives from it.
pub fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    rng::key(seed, &[rng::str_tag("synth"), rng::str_tag(split.name()), index as u64])
}

/// Builds one shifted image and its mask entirely in memory.
pub fn make_image(split: Split, img_seed: u64) -> Result<(Tensor, U8Tensor)> {
    let scene = Scene::sample(img_seed);
    let (clean, mask) = scene.render();
    let mut shift_rng = rng::stream(img_seed, &[rng::str_tag("shift")]);
    let image = split.shift().apply(&clean, &mut shift_rng)?;
    Ok((image, mask))
}

/// Generates `n` images of a split under `out_dir/<split>/`, writing images,
/// masks, and a JSON-lines manifest. Returns the manifest path and entries.
/// Deterministic in (split, n, seed); parallel over indices.
pub fn generate(out_dir: &Path, split: Split, n: usize, seed: u64) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    if n == 0 {
        return Err(Error::contract("generation needs n >= 1"));
    }
    let dir = out_dir.join(split.name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
    let results = exec::map_indexed(n, |i| -> Result<ManifestEntry> {
        let img_seed = image_seed(seed, split, i);
        let (image, mask) = make_image(split, img_seed)?;
        let image_rel = format!("img_{i:05}.sadt");
        let mask_rel = format!("mask_{i:05}.sadt");
        io::write_tensor(&dir.join(&image_rel), &TensorData::F32(image))?;
        io::write_tensor(&dir.join(&mask_rel), &TensorData::U8(mask))?;
        Ok(ManifestEntry {
            image: image_rel,
            mask: mask_rel,
            domain: split.name().to_string(),
            seed: img_seed,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = dir.join("manifest.jsonl");
    io::write_manifest(&manifest, &entries)?;
    Ok((manifest, entries))
}
