//! Dense f32 tensors in row-major layout, plus a u8 variant for label maps.
//!
//! Image tensors are CHW or NCHW with channels first. All math in this
//! crate is f32; there is no wider accumulator type on the tensor side.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(Error::shape(format!("expected scalar, got {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Shape as (n, c, h, w); errors unless rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// CHW -> 1CHW view by copy.
    pub fn unsqueeze0(&self) -> Tensor {
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.shape);
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    /// Batch element `i` of an NCHW tensor, as CHW.
    pub fn slice_batch(&self, i: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(Error::shape(format!("batch index {i} out of {n}")));
        }
        let plane = c * h * w;
        Ok(Tensor {
            shape: vec![c, h, w],
            data: self.data[i * plane..(i + 1) * plane].to_vec(),
        })
    }

    /// Stack CHW tensors of identical shape into NCHW.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let (c, h, w) = first.dims3()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![items.len(), c, h, w], data)
    }

    /// Flip the last axis (width) of a CHW or NCHW tensor.
    pub fn hflip(&self) -> Tensor {
        let w = *self.shape.last().unwrap_or(&1);
        let mut data = self.data.clone();
        if w > 1 {
            for row in data.chunks_mut(w) {
                row.reverse();
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Rec. 601 luma replicated across channels; input must be 3xHxW.
    pub fn grayscale(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("grayscale wants 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * plane];
        for i in 0..plane {
            let y = 0.299 * self.data[i] + 0.587 * self.data[plane + i] + 0.114 * self.data[2 * plane + i];
            data[i] = y;
            data[plane + i] = y;
            data[2 * plane + i] = y;
        }
        Ok(Tensor {
            shape: vec![3, h, w],
            data,
        })
    }

    /// Rectangular crop of a CHW tensor.
    pub fn crop3(&self, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
            return Err(Error::shape(format!(
                "crop {top},{left},{ch},{cw} out of {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(c * ch * cw);
        for cc in 0..c {
            for y in 0..ch {
                let off = (cc * h + top + y) * w + left;
                data.extend_from_slice(&self.data[off..off + cw]);
            }
        }
        Tensor::new(vec![c, ch, cw], data)
    }

    pub fn clamp01_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Label maps and other byte-valued grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct U8Tensor {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl U8Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(U8Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        U8Tensor {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn hflip(&self) -> U8Tensor {
        let w = *self.shape.last().unwrap_or(&1);
        let mut data = self.data.clone();
        if w > 1 {
            for row in data.chunks_mut(w) {
                row.reverse();
            }
        }
        U8Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn crop2(&self, top: usize, left: usize, ch: usize, cw: usize) -> Result<U8Tensor> {
        let (h, w) = self.dims2()?;
        if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
            return Err(Error::shape(format!(
                "crop {top},{left},{ch},{cw} out of {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            let off = (top + y) * w + left;
            data.extend_from_slice(&self.data[off..off + cw]);
        }
        U8Tensor::new(vec![ch, cw], data)
    }

    /// Nearest-neighbour resize with half-pixel centers; labels stay crisp.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Result<U8Tensor> {
        let (h, w) = self.dims2()?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("resize to zero extent"));
        }
        let ry = h as f32 / oh as f32;
        let rx = w as f32 / ow as f32;
        let mut data = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = (((y as f32 + 0.5) * ry) as usize).min(h - 1);
            for x in 0..ow {
                let sx = (((x as f32 + 0.5) * rx) as usize).min(w - 1);
                data.push(self.data[sy * w + sx]);
            }
        }
        U8Tensor::new(vec![oh, ow], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(U8Tensor::new(vec![2, 3], vec![0; 7]).is_err());
    }

    #[test]
    fn hflip_reverses_rows_only() {
        let t = Tensor::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let f = t.hflip();
        assert_eq!(f.data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(t.hflip().hflip(), t);
    }

    #[test]
    fn grayscale_is_luma() {
        let t = Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let g = t.grayscale().unwrap();
        assert!((g.data()[0] - 0.299).abs() < 1e-6);
        assert_eq!(g.data()[0], g.data()[1]);
        assert_eq!(g.data()[1], g.data()[2]);
    }

    #[test]
    fn grayscale_fixes_gray_inputs() {
        let t = Tensor::full(&[3, 2, 2], 0.5);
        let g = t.grayscale().unwrap();
        for v in g.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_matches_hand_window() {
        let t = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let c = t.crop3(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4., 5., 7., 8.]);
    }

    #[test]
    fn stack_then_slice_round_trips() {
        let a = Tensor::full(&[2, 2, 2], 1.0);
        let b = Tensor::full(&[2, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.slice_batch(0).unwrap(), a);
        assert_eq!(s.slice_batch(1).unwrap(), b);
    }

    #[test]
    fn nearest_resize_identity_and_upscale() {
        let m = U8Tensor::new(vec![2, 2], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(m.resize_nearest(2, 2).unwrap(), m);
        let up = m.resize_nearest(4, 4).unwrap();
        // each source cell should expand into a 2x2 block
        assert_eq!(up.data(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }
}
