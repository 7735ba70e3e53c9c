//! Value-level numeric kernels shared by the autodiff graph and the
//! non-differentiable paths (metrics, flow estimation, baselines).

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::linalg::{gemm, gemm_new, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(shape_err!("kernel {k} / stride {stride} must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!(
                "kernel {k} larger than padded input {h}x{w} (pad {pad})"
            ));
        }
        Ok(Self {
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source index (y, x) for an output position and tap, `None` when it
    /// falls into zero padding.
    #[cfg(test)]
    fn source(
        &self,
        oy: usize,
        ox: usize,
        ky: usize,
        kx: usize,
        padding: Padding,
    ) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
        match padding {
            Padding::Zero if !inside => None,
            Padding::Zero => Some((iy as usize, ix as usize)),
            Padding::Replicate => Some((
                iy.clamp(0, self.h as isize - 1) as usize,
                ix.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }
}

/// Output columns `[lo, hi)` whose tap `k` reads inside `0..len` along one
/// axis, and the first source index.
#[inline]
fn valid_span(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // i = o·stride + k − pad must satisfy 0 ≤ i < len
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if len + pad <= k {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Unfold `x` into a `(ci·k·k) × (ho·wo)` row-major matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, padding: Padding) -> Vec<f64> {
    let mut col = Vec::with_capacity(g.rows() * g.cols());
    let plane = g.h * g.w;
    for c in 0..g.ci {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_span(g.wo, g.w, kx, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let row = if iy >= 0 && (iy as usize) < g.h {
                        Some(iy as usize)
                    } else if padding == Padding::Replicate {
                        Some(iy.clamp(0, g.h as isize - 1) as usize)
                    } else {
                        None
                    };
                    let Some(iy) = row else {
                        col.resize(col.len() + g.wo, 0.0);
                        continue;
                    };
                    let line = &src[iy * g.w..(iy + 1) * g.w];
                    let (left, right) = match padding {
                        Padding::Zero => (0.0, 0.0),
                        Padding::Replicate => (line[0], line[g.w - 1]),
                    };
                    col.resize(col.len() + lo, left);
                    if hi > lo {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            col.extend_from_slice(&line[first..first + (hi - lo)]);
                        } else {
                            col.extend(line[first..].iter().step_by(g.stride).take(hi - lo));
                        }
                    }
                    col.resize(col.len() + (g.wo - hi.max(lo)), right);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulate a column matrix back onto `dx`.
pub fn col2im_add(col: &[f64], g: &ConvGeom, padding: Padding, dx: &mut [f64]) {
    let n = g.cols();
    let plane = g.h * g.w;
    for c in 0..g.ci {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(g.wo, g.w, kx, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let iy = if iy >= 0 && (iy as usize) < g.h {
                        iy as usize
                    } else if padding == Padding::Replicate {
                        iy.clamp(0, g.h as isize - 1) as usize
                    } else {
                        continue;
                    };
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let line = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if hi > lo {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (d, v) in line[first..first + (hi - lo)].iter_mut().zip(&s[lo..hi])
                            {
                                *d += v;
                            }
                        } else {
                            for (d, v) in line[first..].iter_mut().step_by(g.stride).zip(&s[lo..hi])
                            {
                                *d += v;
                            }
                        }
                    }
                    if padding == Padding::Replicate {
                        line[0] += s[..lo].iter().sum::<f64>();
                        line[g.w - 1] += s[hi.max(lo)..].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `(co, ci, k·k)`, `bias` is `(co, 1, 1)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    padding: Padding,
) -> Result<Tensor> {
    let geom = conv_geom(x, weight, stride, pad)?;
    let col = im2col(x.data(), &geom, padding);
    Ok(conv_from_columns(&col, &geom, weight, bias))
}

pub(crate) fn conv_geom(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let k = kernel_size(weight)?;
    if weight.height() != x.channels() {
        return Err(shape_err!(
            "conv weight expects {} input channels, got {}",
            weight.height(),
            x.channels()
        ));
    }
    ConvGeom::new(x.channels(), x.height(), x.width(), k, stride, pad)
}

pub(crate) fn kernel_size(weight: &Tensor) -> Result<usize> {
    let taps = weight.width();
    let k = libm::sqrt(taps as f64) as usize;
    if k * k != taps {
        return Err(shape_err!("conv weight taps {taps} is not a square kernel"));
    }
    Ok(k)
}

/// `W · col + b`, shared by ordinary and deformable convolution.
pub(crate) fn conv_from_columns(
    col: &[f64],
    geom: &ConvGeom,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Tensor {
    let co = weight.channels();
    let n = geom.cols();
    let mut out = Tensor::zeros(co, geom.ho, geom.wo);
    if let Some(b) = bias {
        for o in 0..co {
            let bo = b.data()[o];
            out.channel_mut(o).iter_mut().for_each(|v| *v = bo);
        }
    }
    gemm(
        co,
        geom.rows(),
        n,
        MatRef::row_major(weight.data(), geom.rows()),
        MatRef::row_major(col, n),
        if bias.is_some() { 1.0 } else { 0.0 },
        out.data_mut(),
    );
    out
}

/// Gradients of `W · col + b` w.r.t. the weight, bias and columns.
pub(crate) fn conv_columns_backward(
    col: &[f64],
    geom: &ConvGeom,
    weight: &Tensor,
    dout: &Tensor,
    want_dcol: bool,
) -> (Tensor, Tensor, Option<Vec<f64>>) {
    let co = weight.channels();
    let n = geom.cols();
    let kk = geom.rows();
    let mut dw = Tensor::zeros_like(weight);
    gemm(
        co,
        n,
        kk,
        MatRef::row_major(dout.data(), n),
        MatRef::transposed(col, n),
        0.0,
        dw.data_mut(),
    );
    let mut db = Tensor::zeros(co, 1, 1);
    for o in 0..co {
        db.data_mut()[o] = dout.channel(o).iter().sum();
    }
    let dcol = want_dcol.then(|| {
        gemm_new(
            kk,
            co,
            n,
            MatRef::transposed(weight.data(), kk),
            MatRef::row_major(dout.data(), n),
        )
    });
    (dw, db, dcol)
}

/// One bilinear read from a single-channel plane with replicate (clamped)
/// borders. Reads at integer coordinates return the stored value exactly.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: f64,
    fy: f64,
    live_x: bool,
    live_y: bool,
}

impl BilinearTap {
    #[inline]
    pub fn new(h: usize, w: usize, py: f64, px: f64) -> Self {
        let (x0, x1, fx, live_x) = axis(w, px);
        let (y0, y1, fy, live_y) = axis(h, py);
        Self {
            i00: y0 * w + x0,
            i01: y0 * w + x1,
            i10: y1 * w + x0,
            i11: y1 * w + x1,
            fx,
            fy,
            live_x,
            live_y,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let v00 = plane[self.i00];
        match (self.fx == 0.0, self.fy == 0.0) {
            (true, true) => v00,
            (false, true) => v00 + self.fx * (plane[self.i01] - v00),
            (true, false) => v00 + self.fy * (plane[self.i10] - v00),
            (false, false) => {
                let top = v00 + self.fx * (plane[self.i01] - v00);
                let v10 = plane[self.i10];
                let bot = v10 + self.fx * (plane[self.i11] - v10);
                top + self.fy * (bot - top)
            }
        }
    }

    /// Adjoint of [`sample`](Self::sample): spread `g` over the four taps.
    #[inline]
    pub fn scatter(&self, plane: &mut [f64], g: f64) {
        if self.fx == 0.0 && self.fy == 0.0 {
            plane[self.i00] += g;
            return;
        }
        let (fx, fy) = (self.fx, self.fy);
        plane[self.i00] += g * (1.0 - fx) * (1.0 - fy);
        plane[self.i01] += g * fx * (1.0 - fy);
        plane[self.i10] += g * (1.0 - fx) * fy;
        plane[self.i11] += g * fx * fy;
    }

    /// Partial derivatives of the sample w.r.t. the read position `(∂/∂x, ∂/∂y)`.
    /// Zero along an axis whose coordinate was clamped.
    #[inline]
    pub fn position_grad(&self, plane: &[f64]) -> (f64, f64) {
        let (v00, v01, v10, v11) = (
            plane[self.i00],
            plane[self.i01],
            plane[self.i10],
            plane[self.i11],
        );
        let dx = if self.live_x {
            (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
        } else {
            0.0
        };
        let dy = if self.live_y {
            (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01)
        } else {
            0.0
        };
        (dx, dy)
    }
}

#[inline]
fn axis(n: usize, p: f64) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let live = n > 1 && p >= 0.0 && p <= hi;
    let pc = if p.is_nan() { 0.0 } else { p.clamp(0.0, hi) };
    let i0 = libm::floor(pc) as usize;
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, pc - i0 as f64, live)
}

/// True when a read at `(py, px)` lies inside the `h × w` grid.
#[inline]
pub fn in_bounds(h: usize, w: usize, py: f64, px: f64) -> bool {
    py >= 0.0 && px >= 0.0 && py <= (h - 1) as f64 && px <= (w - 1) as f64
}

/// Bilinear ×2 upsampling (half-pixel centres, clamped borders).
pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    let taps = upsample2_taps(h, w);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for (d, tap) in dst.iter_mut().zip(&taps) {
            *d = tap.sample(src);
        }
    }
    out
}

pub(crate) fn upsample2_taps(h: usize, w: usize) -> Vec<BilinearTap> {
    let mut taps = Vec::with_capacity(4 * h * w);
    for oy in 0..2 * h {
        let sy = (oy as f64 + 0.5) * 0.5 - 0.5;
        for ox in 0..2 * w {
            let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
            taps.push(BilinearTap::new(h, w, sy, sx));
        }
    }
    taps
}

/// 2×2 mean pooling; dimensions must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avg_pool2 needs even dims, got {h}x{w}"));
    }
    Ok(Tensor::from_fn(c, h / 2, w / 2, |ch, y, xx| {
        0.25 * (x.at(ch, 2 * y, 2 * xx)
            + x.at(ch, 2 * y, 2 * xx + 1)
            + x.at(ch, 2 * y + 1, 2 * xx)
            + x.at(ch, 2 * y + 1, 2 * xx + 1))
    }))
}

/// Backward sampling of every channel of `x` along a dense flow, with
/// replicate borders. Returns the warped image and an in-bounds mask.
pub fn warp_values(x: &Tensor, flow: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if flow.channels() != 2 || flow.height() != h || flow.width() != w {
        return Err(shape_err!(
            "flow {:?} does not match image {:?}",
            flow.shape(),
            x.shape()
        ));
    }
    let mut out = Tensor::zeros(c, h, w);
    let mut mask = Tensor::zeros(1, h, w);
    let (u, v) = (flow.channel(0), flow.channel(1));
    let plane = h * w;
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let (py, px) = (y as f64 + v[p], xx as f64 + u[p]);
            let tap = BilinearTap::new(h, w, py, px);
            for ch in 0..c {
                out.data_mut()[ch * plane + p] = tap.sample(x.channel(ch));
            }
            if in_bounds(h, w, py, px) {
                mask.data_mut()[p] = 1.0;
            }
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn naive_im2col(x: &[f64], g: &ConvGeom, padding: Padding) -> Vec<f64> {
        let n = g.cols();
        let mut col = vec![0.0; g.rows() * n];
        for c in 0..g.ci {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx, padding) {
                                col[row * n + oy * g.wo + ox] = x[(c * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    proptest! {
        #[test]
        fn im2col_matches_tap_by_tap_reads(
            ci in 1usize..3, h in 1usize..9, w in 1usize..9, k in 1usize..5,
            stride in 1usize..3, pad in 0usize..3, replicate: bool, seed: u64,
        ) {
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let g = ConvGeom::new(ci, h, w, k, stride, pad).unwrap();
            let padding = if replicate { Padding::Replicate } else { Padding::Zero };
            let x: Vec<f64> = (0..ci * h * w)
                .map(|i| ((i as u64 ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11) as f64 / (1u64 << 53) as f64)
                .collect();
            let fast = im2col(&x, &g, padding);
            let slow = naive_im2col(&x, &g, padding);
            prop_assert_eq!(fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            slow.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

            // <im2col(x), c> = <x, col2im(c)>
            let c: Vec<f64> = (0..fast.len()).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let mut back = vec![0.0; x.len()];
            col2im_add(&c, &g, padding, &mut back);
            let lhs: f64 = fast.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn bilinear_integer_reads_are_exact() {
        let plane = [-0.0, 1.5, 2.25, 3.0];
        for (py, px, want) in [
            (0.0, 0.0, -0.0f64),
            (0.0, 1.0, 1.5),
            (1.0, 0.0, 2.25),
            (1.0, 1.0, 3.0),
        ] {
            let got = BilinearTap::new(2, 2, py, px).sample(&plane);
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn bilinear_interpolates_affine_ramp_exactly() {
        let (h, w) = (5, 7);
        let plane: Vec<f64> = (0..h * w)
            .map(|i| 0.5 * (i / w) as f64 + 0.25 * (i % w) as f64)
            .collect();
        let tap = BilinearTap::new(h, w, 1.25, 3.5);
        assert!((tap.sample(&plane) - (0.5 * 1.25 + 0.25 * 3.5)).abs() < 1e-14);
        let (dx, dy) = tap.position_grad(&plane);
        assert!((dx - 0.25).abs() < 1e-14 && (dy - 0.5).abs() < 1e-14);
    }

    #[test]
    fn clamped_reads_replicate_border() {
        let plane = [1.0, 2.0, 3.0, 4.0];
        let tap = BilinearTap::new(2, 2, -3.0, 5.0);
        assert_eq!(tap.sample(&plane), 2.0);
        assert_eq!(tap.position_grad(&plane), (0.0, 0.0));
    }

    #[test]
    fn conv_zero_padding_matches_direct_sum() {
        let x = Tensor::from_fn(2, 4, 5, |c, y, x| (c * 20 + y * 5 + x) as f64 * 0.1 - 1.0);
        let wt = Tensor::from_fn(3, 2, 9, |o, i, t| ((o * 18 + i * 9 + t) % 7) as f64 - 3.0);
        let b = Tensor::from_vec(3, 1, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d(&x, &wt, Some(&b), 1, 1, Padding::Zero).unwrap();
        for o in 0..3 {
            for y in 0..4 {
                for xx in 0..5 {
                    let mut s = b.data()[o];
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy >= 0 && ix >= 0 && iy < 4 && ix < 5 {
                                    s += wt.at(o, i, ky * 3 + kx)
                                        * x.at(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((out.at(o, y, xx) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_conv_output_size() {
        let x = Tensor::zeros(1, 8, 6);
        let wt = Tensor::zeros(2, 1, 9);
        let out = conv2d(&x, &wt, None, 2, 1, Padding::Zero).unwrap();
        assert_eq!((out.height(), out.width()), (4, 3));
    }
}
