//! Dense 4-D tensors in (batch, channel, height, width) row-major layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extent of a [`Tensor4`] along its four axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// True when `self` fits inside `outer` along every axis.
    pub fn fits_in(&self, outer: &Shape4) -> bool {
        self.n <= outer.n && self.c <= outer.c && self.h <= outer.h && self.w <= outer.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<S> {
    shape: Shape4,
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Shape4>, value: S) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut([usize; 4]) -> S) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn scalar(v: S) -> Self {
        Tensor4 {
            shape: Shape4::scalar(),
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::internal(format!("expected a scalar tensor, got shape {}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.expect_shape(other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn expect_shape(&self, shape: Shape4) -> Result<()> {
        if self.shape != shape {
            return Err(Error::config(format!(
                "shape mismatch: expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Copy of the leading block `[0:n, 0:c, 0:h, 0:w]`.
    ///
    /// Used for width slicing of parameters and for cropping padded images
    /// (padding is always appended at the bottom/right).
    pub fn slice_leading(&self, shape: Shape4) -> Result<Self> {
        if !shape.fits_in(&self.shape) {
            return Err(Error::config(format!(
                "cannot take leading slice {shape} of tensor {}",
                self.shape
            )));
        }
        if shape == self.shape {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    let start = self.offset(n, c, h, 0);
                    data.extend_from_slice(&self.data[start..start + shape.w]);
                }
            }
        }
        Ok(Tensor4 { shape, data })
    }

    /// Zero tensor of shape `outer` with `self` written into its leading block.
    pub fn embed_leading(&self, outer: Shape4) -> Result<Self> {
        let mut out = Self::zeros(outer);
        out.add_leading(self)?;
        Ok(out)
    }

    /// Adds `block` into the leading block of `self`.
    pub fn add_leading(&mut self, block: &Self) -> Result<()> {
        let s = block.shape;
        if !s.fits_in(&self.shape) {
            return Err(Error::config(format!(
                "block {s} does not fit in tensor {}",
                self.shape
            )));
        }
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    let dst = self.offset(n, c, h, 0);
                    let src = block.offset(n, c, h, 0);
                    for (d, &v) in self.data[dst..dst + s.w].iter_mut().zip(&block.data[src..src + s.w]) {
                        *d += v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Zero-pads the spatial dims at the bottom/right up to `(h, w)`.
    pub fn pad_spatial(&self, h: usize, w: usize) -> Result<Self> {
        let target = Shape4::new(self.shape.n, self.shape.c, h, w);
        self.embed_leading(target)
    }

    /// Copy of channels `[start, end)`.
    pub fn channel_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.shape.c {
            return Err(Error::config(format!(
                "channel range {start}..{end} outside tensor {}",
                self.shape
            )));
        }
        let s = self.shape;
        let plane = s.h * s.w;
        let mut data = Vec::with_capacity(s.n * (end - start) * plane);
        for n in 0..s.n {
            let a = self.offset(n, start, 0, 0);
            let b = self.offset(n, 0, 0, 0) + end * plane;
            data.extend_from_slice(&self.data[a..b]);
        }
        Ok(Tensor4 {
            shape: Shape4::new(s.n, end - start, s.h, s.w),
            data,
        })
    }

    /// One batch item as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if n >= self.shape.n {
            return Err(Error::config(format!("batch index {n} outside tensor {}", self.shape)));
        }
        let s = self.shape;
        let per = s.c * s.h * s.w;
        Ok(Tensor4 {
            shape: Shape4::new(1, s.c, s.h, s.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Stacks `(1, c, h, w)` tensors of equal shape along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("cannot stack an empty list of tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        for t in items {
            if t.shape.c != s.c || t.shape.h != s.h || t.shape.w != s.w {
                return Err(Error::config(format!(
                    "cannot stack tensors of shapes {} and {}",
                    s, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n).sum();
        Ok(Tensor4 {
            shape: Shape4::new(n, s.c, s.h, s.w),
            data,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_and_embed_are_inverse_on_the_block() {
        let t = Tensor4::<f64>::from_fn([2, 3, 4, 5], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f64);
        let s = t.slice_leading(Shape4::new(1, 2, 3, 4)).unwrap();
        assert_eq!(s.at(0, 1, 2, 3), 123.0);
        let e = s.embed_leading(t.shape()).unwrap();
        assert_eq!(e.at(0, 1, 2, 3), 123.0);
        assert_eq!(e.at(1, 2, 3, 4), 0.0);
        assert_eq!(e.slice_leading(s.shape()).unwrap(), s);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn channel_range_and_stack() {
        let t = Tensor4::<f64>::from_fn([2, 4, 2, 2], |[n, c, _, _]| (n * 10 + c) as f64);
        let r = t.channel_range(1, 3).unwrap();
        assert_eq!(r.shape(), Shape4::new(2, 2, 2, 2));
        assert_eq!(r.at(1, 0, 0, 0), 11.0);
        assert_eq!(r.at(1, 1, 1, 1), 12.0);
        let a = t.batch_item(0).unwrap();
        let b = t.batch_item(1).unwrap();
        assert_eq!(Tensor4::stack(&[a, b]).unwrap(), t);
    }

    #[test]
    fn oversized_slice_is_rejected() {
        let t = Tensor4::<f32>::zeros([1, 2, 2, 2]);
        assert!(t.slice_leading(Shape4::new(1, 3, 2, 2)).is_err());
    }
}
