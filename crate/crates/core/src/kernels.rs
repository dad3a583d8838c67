//! Convolution, bilinear resampling and moment kernels.
//!
//! Parallelism is over independent output planes; within a plane every
//! accumulator is updated in a fixed (ic, kh, kw) order, so the parallel
//! and sequential builds produce bitwise identical results. Reductions
//! (weight gradients, moments) run sequentially over the flat index.

use crate::error::{Error, Result};
use crate::exec;

/// Geometry of one conv2d application. Input NCHW, weight OIHW.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("conv stride must be positive"));
        }
        if self.h + 2 * self.pad < self.kh || self.w + 2 * self.pad < self.kw {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                self.h + 2 * self.pad,
                self.w + 2 * self.pad
            )));
        }
        Ok(())
    }
}

/// Valid output-column range for a kernel column: all ox with
/// 0 <= ox*stride + kw - pad < w.
#[inline]
fn ox_range(w: usize, kw: usize, pad: usize, stride: usize, ow: usize) -> (usize, usize) {
    let off = kw as i64 - pad as i64;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride).min(ow)
    };
    let hi_raw = w as i64 - 1 - off;
    if hi_raw < 0 {
        return (0, 0);
    }
    let hi = (hi_raw as usize / stride + 1).min(ow);
    (lo.min(hi), hi)
}

/// out[n,oc] = bias[oc] + sum_{ic,kh,kw} weight[oc,ic,kh,kw] * x[n,ic,...]
pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: &[f32], d: &ConvDims, out: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    debug_assert_eq!(x.len(), d.n * d.ic * d.h * d.w);
    debug_assert_eq!(weight.len(), d.oc * d.ic * d.kh * d.kw);
    debug_assert_eq!(bias.len(), d.oc);
    debug_assert_eq!(out.len(), d.n * d.oc * oh * ow);
    let d = *d;
    exec::for_each_chunk_mut(out, oh * ow, |plane, out_plane| {
        let n = plane / d.oc;
        let oc = plane % d.oc;
        out_plane.fill(bias[oc]);
        for ic in 0..d.ic {
            let x_plane = &x[(n * d.ic + ic) * d.h * d.w..][..d.h * d.w];
            for kh in 0..d.kh {
                let wbase = ((oc * d.ic + ic) * d.kh + kh) * d.kw;
                for oy in 0..oh {
                    let iy = (oy * d.stride + kh) as i64 - d.pad as i64;
                    if iy < 0 || iy >= d.h as i64 {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * d.w..][..d.w];
                    let o_row = &mut out_plane[oy * ow..][..ow];
                    for kw in 0..d.kw {
                        let wv = weight[wbase + kw];
                        let (lo, hi) = ox_range(d.w, kw, d.pad, d.stride, ow);
                        if lo >= hi {
                            continue;
                        }
                        if d.stride == 1 {
                            let src = &x_row[(lo as i64 + kw as i64 - d.pad as i64) as usize..][..hi - lo];
                            let dst = &mut o_row[lo..hi];
                            for i in 0..dst.len() {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for ox in lo..hi {
                                let ixx = (ox * d.stride + kw) as i64 - d.pad as i64;
                                o_row[ox] += wv * x_row[ixx as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// grad_x[n,ic] += sum_{oc,kh,kw} weight[oc,ic,kh,kw] * grad_out[n,oc,...].
/// `grad_x` must be zeroed (or hold a prior gradient to accumulate into).
pub fn conv2d_backward_input(grad_out: &[f32], weight: &[f32], d: &ConvDims, grad_x: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    debug_assert_eq!(grad_out.len(), d.n * d.oc * oh * ow);
    debug_assert_eq!(grad_x.len(), d.n * d.ic * d.h * d.w);
    let d = *d;
    exec::for_each_chunk_mut(grad_x, d.h * d.w, |plane, gx_plane| {
        let n = plane / d.ic;
        let ic = plane % d.ic;
        for oc in 0..d.oc {
            let g_plane = &grad_out[(n * d.oc + oc) * oh * ow..][..oh * ow];
            for kh in 0..d.kh {
                let wbase = ((oc * d.ic + ic) * d.kh + kh) * d.kw;
                for oy in 0..oh {
                    let iy = (oy * d.stride + kh) as i64 - d.pad as i64;
                    if iy < 0 || iy >= d.h as i64 {
                        continue;
                    }
                    let gx_row = &mut gx_plane[iy as usize * d.w..][..d.w];
                    let g_row = &g_plane[oy * ow..][..ow];
                    for kw in 0..d.kw {
                        let wv = weight[wbase + kw];
                        let (lo, hi) = ox_range(d.w, kw, d.pad, d.stride, ow);
                        if lo >= hi {
                            continue;
                        }
                        if d.stride == 1 {
                            let base = (lo as i64 + kw as i64 - d.pad as i64) as usize;
                            let dst = &mut gx_row[base..base + (hi - lo)];
                            let src = &g_row[lo..hi];
                            for i in 0..dst.len() {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for ox in lo..hi {
                                let ixx = (ox * d.stride + kw) as i64 - d.pad as i64;
                                gx_row[ixx as usize] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// grad_w[oc,ic,kh,kw] = sum_{n,oy,ox} grad_out[n,oc,oy,ox] * x[n,ic,iy,ix];
/// grad_b[oc] = sum grad_out[n,oc]. Overwrites both outputs.
pub fn conv2d_backward_weights(
    grad_out: &[f32],
    x: &[f32],
    d: &ConvDims,
    grad_w: &mut [f32],
    grad_b: &mut [f32],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    debug_assert_eq!(grad_w.len(), d.oc * d.ic * d.kh * d.kw);
    debug_assert_eq!(grad_b.len(), d.oc);
    let d = *d;
    let per_oc = d.ic * d.kh * d.kw;
    exec::for_each_chunk_mut(grad_w, per_oc, |oc, gw| {
        for ic in 0..d.ic {
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let (lo, hi) = ox_range(d.w, kw, d.pad, d.stride, ow);
                    let mut acc = 0f32;
                    for n in 0..d.n {
                        let g_plane = &grad_out[(n * d.oc + oc) * oh * ow..][..oh * ow];
                        let x_plane = &x[(n * d.ic + ic) * d.h * d.w..][..d.h * d.w];
                        for oy in 0..oh {
                            let iy = (oy * d.stride + kh) as i64 - d.pad as i64;
                            if iy < 0 || iy >= d.h as i64 || lo >= hi {
                                continue;
                            }
                            let g_row = &g_plane[oy * ow..][..ow];
                            let x_row = &x_plane[iy as usize * d.w..][..d.w];
                            if d.stride == 1 {
                                let base = (lo as i64 + kw as i64 - d.pad as i64) as usize;
                                for i in 0..hi - lo {
                                    acc += g_row[lo + i] * x_row[base + i];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ixx = (ox * d.stride + kw) as i64 - d.pad as i64;
                                    acc += g_row[ox] * x_row[ixx as usize];
                                }
                            }
                        }
                    }
                    gw[(ic * d.kh + kh) * d.kw + kw] = acc;
                }
            }
        }
    });
    exec::for_each_chunk_mut(grad_b, 1, |oc, gb| {
        let mut acc = 0f32;
        for n in 0..d.n {
            for g in &grad_out[(n * d.oc + oc) * oh * ow..][..oh * ow] {
                acc += g;
            }
        }
        gb[0] = acc;
    });
}

#[derive(Clone, Copy)]
struct Lerp {
    i0: usize,
    i1: usize,
    t: f32,
}

/// Half-pixel-center source coordinates with edge clamping.
fn lerp_table(src: usize, dst: usize) -> Vec<Lerp> {
    let r = src as f32 / dst as f32;
    (0..dst)
        .map(|d| {
            let s = (d as f32 + 0.5) * r - 0.5;
            let sf = s.floor();
            let t = s - sf;
            let i0 = (sf as i64).clamp(0, src as i64 - 1) as usize;
            let i1 = (sf as i64 + 1).clamp(0, src as i64 - 1) as usize;
            Lerp { i0, i1, t }
        })
        .collect()
}

/// Bilinear resize of `planes` independent HxW planes to OHxOW.
/// Constant planes are reproduced exactly; same-size resize is the identity.
pub fn bilinear_forward(x: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f32]) {
    debug_assert_eq!(x.len(), planes * h * w);
    debug_assert_eq!(out.len(), planes * oh * ow);
    let ys = lerp_table(h, oh);
    let xs = lerp_table(w, ow);
    exec::for_each_chunk_mut(out, oh * ow, |p, out_plane| {
        let x_plane = &x[p * h * w..][..h * w];
        for (oy, ly) in ys.iter().enumerate() {
            let r0 = &x_plane[ly.i0 * w..][..w];
            let r1 = &x_plane[ly.i1 * w..][..w];
            let o_row = &mut out_plane[oy * ow..][..ow];
            for (ox, lx) in xs.iter().enumerate() {
                let a = r0[lx.i0] + lx.t * (r0[lx.i1] - r0[lx.i0]);
                let b = r1[lx.i0] + lx.t * (r1[lx.i1] - r1[lx.i0]);
                o_row[ox] = a + ly.t * (b - a);
            }
        }
    });
}

/// Adjoint of `bilinear_forward`; accumulates into `grad_x`.
pub fn bilinear_backward(grad_out: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize, grad_x: &mut [f32]) {
    debug_assert_eq!(grad_out.len(), planes * oh * ow);
    debug_assert_eq!(grad_x.len(), planes * h * w);
    let ys = lerp_table(h, oh);
    let xs = lerp_table(w, ow);
    exec::for_each_chunk_mut(grad_x, h * w, |p, gx_plane| {
        let g_plane = &grad_out[p * oh * ow..][..oh * ow];
        for (oy, ly) in ys.iter().enumerate() {
            let g_row = &g_plane[oy * ow..][..ow];
            for (ox, lx) in xs.iter().enumerate() {
                let g = g_row[ox];
                let wy1 = ly.t;
                let wy0 = 1.0 - wy1;
                let wx1 = lx.t;
                let wx0 = 1.0 - wx1;
                gx_plane[ly.i0 * w + lx.i0] += g * wy0 * wx0;
                gx_plane[ly.i0 * w + lx.i1] += g * wy0 * wx1;
                gx_plane[ly.i1 * w + lx.i0] += g * wy1 * wx0;
                gx_plane[ly.i1 * w + lx.i1] += g * wy1 * wx1;
            }
        }
    });
}

/// Per-channel mean and biased variance over (n, h, w). Two passes,
/// sequential over the flat index within each channel.
pub fn channel_moments(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    debug_assert_eq!(x.len(), n * c * h * w);
    let hw = h * w;
    let m = (n * hw) as f32;
    let pairs = exec::map_indexed(c, |ci| {
        let mut sum = 0f32;
        for ni in 0..n {
            for v in &x[(ni * c + ci) * hw..][..hw] {
                sum += v;
            }
        }
        let mean = sum / m;
        let mut ss = 0f32;
        for ni in 0..n {
            for v in &x[(ni * c + ci) * hw..][..hw] {
                let d = v - mean;
                ss += d * d;
            }
        }
        (mean, ss / m)
    });
    pairs.into_iter().unzip()
}

/// Per-(sample, channel) mean and biased variance over (h, w) only.
/// Output vectors have length n*c, sample-major.
pub fn sample_moments(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    debug_assert_eq!(x.len(), n * c * h * w);
    let hw = h * w;
    let m = hw as f32;
    let pairs = exec::map_indexed(n * c, |i| {
        let plane = &x[i * hw..][..hw];
        let mut sum = 0f32;
        for v in plane {
            sum += v;
        }
        let mean = sum / m;
        let mut ss = 0f32;
        for v in plane {
            let d = v - mean;
            ss += d * d;
        }
        (mean, ss / m)
    });
    pairs.into_iter().unzip()
}
