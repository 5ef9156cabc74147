//! Dense row-major `f64` tensors.
//!
//! Image tensors use the `(N, C, H, W)` layout. Reductions produce rank-0
//! tensors (shape `[]`, one element); per-sample reductions produce `[N]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                "nchw",
                format!("expected rank-4 tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |a - b|`; infinite when the shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `i` of a batch as an `N = 1` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::invalid("batch_item", "rank-0 tensor"))?;
        if i >= n {
            return Err(Error::invalid("batch_item", format!("index {i} out of {n}")));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        })
    }

    /// Concatenate tensors along the leading (batch) axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.len() != first.shape.len() || &t.shape[1..] != tail {
                return Err(Error::shape("stack_batch", &first.shape, &t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    /// Channels `start..start + len` of an `(N, C, H, W)` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.nchw()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor {
            shape: vec![n, len, h, w],
            data,
        })
    }

    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, ca, h, w) = a.nchw()?;
        let (nb, cb, hb, wb) = b.nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", &a.shape, &b.shape));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(Tensor {
            shape: vec![n, ca + cb, h, w],
            data,
        })
    }

    /// Space-to-depth by a factor of two. Output channel `c * 4 + k` holds
    /// position `k` (row-major within the 2x2 tile) of input channel `c`.
    pub fn squeeze2(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "squeeze",
                format!("spatial extents must be even, got {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let k = (y % 2) * 2 + (x % 2);
                        let oc = ch * 4 + k;
                        let dst = ((b * 4 * c + oc) * ho + y / 2) * wo + x / 2;
                        out[dst] = self.data[((b * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, 4 * c, ho, wo],
            data: out,
        })
    }

    /// Exact inverse of [`Tensor::squeeze2`].
    pub fn unsqueeze2(&self) -> Result<Tensor> {
        let (n, c4, ho, wo) = self.nchw()?;
        if c4 % 4 != 0 {
            return Err(Error::invalid(
                "unsqueeze",
                format!("channel count {c4} not divisible by 4"),
            ));
        }
        let c = c4 / 4;
        let (h, w) = (ho * 2, wo * 2);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let k = (y % 2) * 2 + (x % 2);
                        let src = ((b * c4 + ch * 4 + k) * ho + y / 2) * wo + x / 2;
                        out[((b * c + ch) * h + y) * w + x] = self.data[src];
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, c, h, w],
            data: out,
        })
    }

    /// Zero-pad the spatial extents of an `(N, C, H, W)` tensor to
    /// `height x width`, centering the original content.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.nchw()?;
        if height < h || width < w {
            return Err(Error::invalid(
                "pad_to",
                format!("cannot pad {h}x{w} down to {height}x{width}"),
            ));
        }
        let (top, left) = ((height - h) / 2, (width - w) / 2);
        let mut out = Tensor::zeros(vec![n, c, height, width]);
        for p in 0..n * c {
            for y in 0..h {
                let src = (p * h + y) * w;
                let dst = (p * height + y + top) * width + left;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of an `(N, C, H, W)` tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = self.nchw()?;
        if h == 0 || w == 0 || y0 + h > hh || x0 + w > ww {
            return Err(Error::invalid(
                "crop",
                format!("window {h}x{w}@({y0},{x0}) outside {hh}x{ww}"),
            ));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let src = (p * hh + y0 + y) * ww + x0;
                data.extend_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(Tensor {
            shape: vec![n, c, h, w],
            data,
        })
    }

    /// Write `patch` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, patch: &Tensor, y0: usize, x0: usize) -> Result<()> {
        let (n, c, hh, ww) = self.nchw()?;
        let (pn, pc, h, w) = patch.nchw()?;
        if (pn, pc) != (n, c) || y0 + h > hh || x0 + w > ww {
            return Err(Error::shape("paste", &self.shape, &patch.shape));
        }
        for p in 0..n * c {
            for y in 0..h {
                let dst = (p * hh + y0 + y) * ww + x0;
                let src = (p * h + y) * w;
                self.data[dst..dst + w].copy_from_slice(&patch.data[src..src + w]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeeze_declared_ordering() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = x.squeeze2().unwrap();
        assert_eq!(s.shape(), &[1, 4, 1, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn squeeze_rejects_odd_extent() {
        let x = Tensor::zeros(vec![1, 1, 3, 2]);
        assert!(matches!(x.squeeze2(), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn pad_centers_content() {
        let x = Tensor::ones(vec![1, 1, 2, 2]);
        let p = x.pad_to(4, 4).unwrap();
        assert_eq!(p.sum(), 4.0);
        assert_eq!(p.data()[5], 1.0);
        assert_eq!(p.data()[0], 0.0);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn crop_paste_roundtrip() {
        let x = Tensor::from_fn(vec![1, 2, 5, 6], |i| i as f64);
        let c = x.crop(1, 2, 3, 3).unwrap();
        let mut y = Tensor::zeros(vec![1, 2, 5, 6]);
        y.paste(&c, 1, 2).unwrap();
        assert_eq!(y.crop(1, 2, 3, 3).unwrap(), c);
    }
}
