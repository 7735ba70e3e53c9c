//! Dense channel-major (C, H, W) tensors of `f64`.
//!
//! Every image-like quantity in the crate uses this layout: RGB frames are
//! `(3, H, W)`, Bayer mosaics `(1, H, W)`, flow fields `(2, H, W)` with
//! channel 0 horizontal and channel 1 vertical displacement, scalars `(1, 1, 1)`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
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
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::full(c, h, w, 0.0)
    }

    pub fn full(c: usize, h: usize, w: usize, v: f64) -> Self {
        Self {
            shape: Shape::new(c, h, w),
            data: vec![v; c * h * w],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.c, other.shape.h, other.shape.w)
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(1, 1, 1, v)
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(shape_err!(
                "buffer of {} values does not fill ({c}, {h}, {w})",
                data.len()
            ));
        }
        Ok(Self {
            shape: Shape::new(c, h, w),
            data,
        })
    }

    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self {
            shape: Shape::new(c, h, w),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.c
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.w
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Value of a `(1, 1, 1)` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("expected {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy of a channel range `[from, to)`.
    pub fn channels_slice(&self, from: usize, to: usize) -> Tensor {
        let p = self.shape.plane();
        Tensor {
            shape: Shape::new(to - from, self.shape.h, self.shape.w),
            data: self.data[from * p..to * p].to_vec(),
        }
    }

    /// Spatial crop of all channels.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.shape.h || x0 + w > self.shape.w {
            return Err(shape_err!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {:?}",
                self.shape
            ));
        }
        Ok(Tensor::from_fn(self.shape.c, h, w, |c, y, x| {
            self.at(c, y0 + y, x0 + x)
        }))
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let (h, w) = (first.shape.h, first.shape.w);
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.h != h || p.shape.w != w {
                return Err(shape_err!(
                    "concat spatial mismatch {:?} vs {:?}",
                    first.shape,
                    p.shape
                ));
            }
            c += p.shape.c;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(c, h, w),
            data,
        })
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}
