//! Fixed camera pipeline used for display-referred losses: white balance,
//! colour correction and the sRGB transfer curve.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Breakpoint of the sRGB transfer curve in linear light.
pub const SRGB_LINEAR_KNEE: f64 = 0.0031308;

#[derive(Clone, Debug, PartialEq)]
pub struct IspParams {
    pub wb: [f64; 3],
    pub ccm: [[f64; 3]; 3],
}

impl Default for IspParams {
    fn default() -> Self {
        Self {
            wb: [1.9, 1.0, 1.7],
            ccm: [
                [1.06, -0.27, 0.21],
                [-0.13, 1.15, -0.02],
                [0.04, -0.39, 1.35],
            ],
        }
    }
}

pub fn srgb_encode(v: f64) -> f64 {
    if v <= SRGB_LINEAR_KNEE {
        12.92 * v
    } else {
        1.055 * libm::pow(v, 1.0 / 2.4) - 0.055
    }
}

pub fn srgb_encode_derivative(v: f64) -> f64 {
    if v <= SRGB_LINEAR_KNEE {
        12.92
    } else {
        1.055 / 2.4 * libm::pow(v, 1.0 / 2.4 - 1.0)
    }
}

#[inline]
fn clip(v: f64) -> (f64, f64) {
    if (0.0..=1.0).contains(&v) {
        (v, 1.0)
    } else {
        (v.clamp(0.0, 1.0), 0.0)
    }
}

/// Intermediate values of one pixel through the pipeline.
struct PixelTrace {
    gate_in: [f64; 3],
    gate_wb: [f64; 3],
    gate_ccm: [f64; 3],
    ccm_out: [f64; 3],
}

impl IspParams {
    /// White balance (1, 1, 1) and identity colour correction: only the
    /// clipping and transfer curve remain.
    pub fn identity() -> Self {
        Self {
            wb: [1.0; 3],
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    fn trace(&self, rgb: [f64; 3]) -> PixelTrace {
        let mut gate_in = [0.0; 3];
        let mut gate_wb = [0.0; 3];
        let mut balanced = [0.0; 3];
        for c in 0..3 {
            let (v, g) = clip(rgb[c]);
            gate_in[c] = g;
            let (b, gb) = clip(v * self.wb[c]);
            balanced[c] = b;
            gate_wb[c] = gb;
        }
        let mut gate_ccm = [0.0; 3];
        let mut ccm_out = [0.0; 3];
        for r in 0..3 {
            let m = self.ccm[r];
            let (v, g) = clip(m[0] * balanced[0] + m[1] * balanced[1] + m[2] * balanced[2]);
            ccm_out[r] = v;
            gate_ccm[r] = g;
        }
        PixelTrace {
            gate_in,
            gate_wb,
            gate_ccm,
            ccm_out,
        }
    }

    pub fn pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        let t = self.trace(rgb);
        t.ccm_out.map(srgb_encode)
    }

    /// Apply to a `(3, H, W)` linear frame.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != 3 {
            return Err(shape_err!("ISP expects 3 channels, got {}", x.channels()));
        }
        let plane = x.shape().plane();
        let mut out = Tensor::zeros_like(x);
        for p in 0..plane {
            let rgb = [x.data()[p], x.data()[plane + p], x.data()[2 * plane + p]];
            let o = self.pixel(rgb);
            for c in 0..3 {
                out.data_mut()[c * plane + p] = o[c];
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of [`apply`](Self::apply) at `x`.
    pub fn backward(&self, x: &Tensor, gout: &Tensor) -> Result<Tensor> {
        x.expect_shape(gout.shape())?;
        let plane = x.shape().plane();
        let mut dx = Tensor::zeros_like(x);
        for p in 0..plane {
            let rgb = [x.data()[p], x.data()[plane + p], x.data()[2 * plane + p]];
            let t = self.trace(rgb);
            // d out_r / d ccm_out_r, gated by the post-CCM clip
            let mut up = [0.0; 3];
            for r in 0..3 {
                up[r] = gout.data()[r * plane + p]
                    * srgb_encode_derivative(t.ccm_out[r])
                    * t.gate_ccm[r];
            }
            for c in 0..3 {
                let through_ccm: f64 = (0..3).map(|r| up[r] * self.ccm[r][c]).sum();
                dx.data_mut()[c * plane + p] =
                    through_ccm * t.gate_wb[c] * self.wb[c] * t.gate_in[c];
            }
        }
        Ok(dx)
    }
}
