//! Non-learned reference restorers.

use alloc::vec::Vec;

use crate::degrade::{bilinear_demosaic, RawFrame};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Baseline {
    /// Bilinear interpolation of the mosaic, no denoising.
    #[default]
    Bilinear,
    /// Bilinear demosaic followed by a per-frame bilateral filter.
    BilinearBilateral,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Bilinear => "bilinear",
            Baseline::BilinearBilateral => "bilinear+bilateral",
        }
    }

    pub fn restore_frame(self, raw: &RawFrame) -> Result<Tensor> {
        let rgb = bilinear_demosaic(&raw.cfa, raw.pattern)?;
        Ok(match self {
            Baseline::Bilinear => rgb,
            Baseline::BilinearBilateral => {
                let range = (3.0 * raw.noise.std_at(0.5)).max(1e-3);
                bilateral(&rgb, 2, 1.5, range)
            }
        })
    }

    pub fn restore_clip(self, raws: &[RawFrame]) -> Result<Vec<Tensor>> {
        raws.iter().map(|r| self.restore_frame(r)).collect()
    }
}

/// Edge-preserving smoothing with a `(2r+1)²` window. Range weights use the
/// colour distance between pixels, so all channels share one kernel.
pub fn bilateral(x: &Tensor, radius: usize, sigma_space: f64, sigma_range: f64) -> Tensor {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let r = radius as isize;
    let mut out = Tensor::zeros(c, h, w);
    let mut acc = alloc::vec![0.0; c];
    let ks = -0.5 / (sigma_space * sigma_space);
    let kr = -0.5 / (sigma_range * sigma_range);
    for y in 0..h {
        for xx in 0..w {
            acc.fill(0.0);
            let mut total = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    let mut d2 = 0.0;
                    for ch in 0..c {
                        let d = x.at(ch, sy, sx) - x.at(ch, y, xx);
                        d2 += d * d;
                    }
                    let wgt = libm::exp(ks * (dy * dy + dx * dx) as f64 + kr * d2);
                    total += wgt;
                    for ch in 0..c {
                        acc[ch] += wgt * x.at(ch, sy, sx);
                    }
                }
            }
            for ch in 0..c {
                out.set(ch, y, xx, acc[ch] / total);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{degrade_frame, BayerPattern, NoiseParams};
    use crate::flowmetrics::psnr;
    use crate::rng::stream;
    use crate::scene;

    #[test]
    fn bilateral_keeps_constants_and_steps() {
        let flat = Tensor::full(3, 8, 8, 0.3);
        assert!(
            bilateral(&flat, 2, 1.5, 0.05)
                .zip_map(&flat, |a, b| a - b)
                .unwrap()
                .max_abs()
                < 1e-15
        );
        let step = Tensor::from_fn(1, 8, 8, |_, _, x| if x < 4 { 0.1 } else { 0.9 });
        let out = bilateral(&step, 2, 1.5, 0.05);
        assert!(out.zip_map(&step, |a, b| a - b).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn bilateral_beats_plain_bilinear_on_noisy_frames() {
        let mut rng = stream(1, "baseline");
        let x = scene::smooth_texture(3, 32, 32, &mut rng);
        let raw = degrade_frame(&x, NoiseParams::HIGH, BayerPattern::Rggb, &mut rng).unwrap();
        let a = psnr(&Baseline::Bilinear.restore_frame(&raw).unwrap(), &x).unwrap();
        let b = psnr(
            &Baseline::BilinearBilateral.restore_frame(&raw).unwrap(),
            &x,
        )
        .unwrap();
        assert!(b > a, "{b} <= {a}");
    }
}
