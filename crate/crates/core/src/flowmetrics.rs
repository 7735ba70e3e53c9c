//! Classical optical flow, forward-backward occlusion masks, and the video
//! quality metrics: PSNR, SSIM, warping error (WE), flow discrepancy (tOF)
//! and relational warping error (RWE).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BilinearTap};
use crate::motion::{warp, FlowField};
use crate::tensor::Tensor;

/// Rec. 601 luma of an RGB frame; single-channel frames pass through.
pub fn luma(frame: &Tensor) -> Tensor {
    if frame.channels() < 3 {
        return frame.channels_slice(0, 1);
    }
    let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
    let mut out = Tensor::zeros(1, frame.height(), frame.width());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    }
    out
}

/// Anything that can estimate the flow `f` with `warp(b, f) ≈ a`.
pub trait FlowEstimator {
    fn estimate(&self, a: &Tensor, b: &Tensor) -> Result<FlowField>;
}

/// Coarse-to-fine Horn–Schunck with warping on a 2×2 mean pyramid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HornSchunck {
    /// Weight of the smoothness term (α² on intensities in `[0, 1]`).
    pub smoothness: f64,
    /// Jacobi sweeps per warp.
    pub iterations: usize,
    /// Linearise-and-warp rounds per level.
    pub warps: usize,
    /// Smallest side allowed at the coarsest level.
    pub min_size: usize,
    pub max_levels: usize,
}

impl Default for HornSchunck {
    fn default() -> Self {
        Self {
            smoothness: 1e-3,
            iterations: 60,
            warps: 3,
            min_size: 8,
            max_levels: 5,
        }
    }
}

fn gradients(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = (img[y * w + xr] - img[y * w + xl]) / (xr - xl).max(1) as f64;
            gy[y * w + x] = (img[yd * w + x] - img[yu * w + x]) / (yd - yu).max(1) as f64;
        }
    }
    (gx, gy)
}

/// Horn–Schunck neighbourhood average (1/6 edge, 1/12 corner neighbours).
fn neighbour_mean(f: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let edge = f[yu * w + x] + f[yd * w + x] + f[y * w + xl] + f[y * w + xr];
            let corner = f[yu * w + xl] + f[yu * w + xr] + f[yd * w + xl] + f[yd * w + xr];
            out[y * w + x] = edge / 6.0 + corner / 12.0;
        }
    }
}

impl HornSchunck {
    fn refine(&self, a: &Tensor, b: &Tensor, flow: &mut Tensor) -> Result<()> {
        let (h, w) = (a.height(), a.width());
        let plane = h * w;
        let (ax, ay) = gradients(a.data(), h, w);
        let mut ubar = vec![0.0; plane];
        let mut vbar = vec![0.0; plane];
        for _ in 0..self.warps {
            let (bw, _) = kernels::warp_values(b, flow)?;
            let (bx, by) = gradients(bw.data(), h, w);
            let ix: Vec<f64> = ax.iter().zip(&bx).map(|(p, q)| 0.5 * (p + q)).collect();
            let iy: Vec<f64> = ay.iter().zip(&by).map(|(p, q)| 0.5 * (p + q)).collect();
            let it: Vec<f64> = bw.data().iter().zip(a.data()).map(|(p, q)| p - q).collect();
            let (u0, v0) = (flow.channel(0).to_vec(), flow.channel(1).to_vec());
            for _ in 0..self.iterations {
                neighbour_mean(flow.channel(0), h, w, &mut ubar);
                neighbour_mean(flow.channel(1), h, w, &mut vbar);
                let data = flow.data_mut();
                for p in 0..plane {
                    let r = ix[p] * (ubar[p] - u0[p]) + iy[p] * (vbar[p] - v0[p]) + it[p];
                    let k = r / (self.smoothness + ix[p] * ix[p] + iy[p] * iy[p]);
                    data[p] = ubar[p] - ix[p] * k;
                    data[plane + p] = vbar[p] - iy[p] * k;
                }
            }
        }
        Ok(())
    }
}

impl FlowEstimator for HornSchunck {
    fn estimate(&self, a: &Tensor, b: &Tensor) -> Result<FlowField> {
        if a.shape() != b.shape() {
            return Err(shape_err!(
                "flow between {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        if a.height() < self.min_size || a.width() < self.min_size {
            return Err(shape_err!(
                "frames of {}x{} are below the {} px pyramid floor",
                a.height(),
                a.width(),
                self.min_size
            ));
        }
        let mut pa = vec![luma(a)];
        let mut pb = vec![luma(b)];
        loop {
            let top = &pa[pa.len() - 1];
            let (h, w) = (top.height(), top.width());
            if pa.len() >= self.max_levels
                || h % 2 != 0
                || w % 2 != 0
                || h / 2 < self.min_size
                || w / 2 < self.min_size
            {
                break;
            }
            let na = kernels::avg_pool2(top)?;
            let nb = kernels::avg_pool2(&pb[pb.len() - 1])?;
            pa.push(na);
            pb.push(nb);
        }
        let coarsest = &pa[pa.len() - 1];
        let mut flow = Tensor::zeros(2, coarsest.height(), coarsest.width());
        for level in (0..pa.len()).rev() {
            if level + 1 < pa.len() {
                flow = kernels::upsample2(&flow).scale(2.0);
            }
            self.refine(&pa[level], &pb[level], &mut flow)?;
        }
        FlowField::from_tensor(flow)
    }
}

/// Flow with the default [`HornSchunck`] settings.
pub fn estimate_flow(a: &Tensor, b: &Tensor) -> Result<FlowField> {
    HornSchunck::default().estimate(a, b)
}

pub const DEFAULT_OCCLUSION_THRESHOLD: f64 = 1.0;

/// 1 where `|fwd(p) + bwd(p + fwd(p))| ≤ threshold`, with `bwd` read
/// bilinearly at the clamped position.
pub fn occlusion_map(fwd: &FlowField, bwd: &FlowField, threshold: f64) -> Result<Tensor> {
    if fwd.tensor().shape() != bwd.tensor().shape() {
        return Err(shape_err!(
            "occlusion check of {:?} against {:?}",
            fwd.tensor().shape(),
            bwd.tensor().shape()
        ));
    }
    let (h, w) = (fwd.height(), fwd.width());
    let (bu, bv) = (bwd.tensor().channel(0), bwd.tensor().channel(1));
    Ok(Tensor::from_fn(1, h, w, |_, y, x| {
        let (u, v) = fwd.at(y, x);
        let tap = BilinearTap::new(h, w, y as f64 + v, x as f64 + u);
        let (ru, rv) = (u + tap.sample(bu), v + tap.sample(bv));
        if libm::hypot(ru, rv) <= threshold {
            1.0
        } else {
            0.0
        }
    }))
}

/// Flow `f̂` with `warp(frame_{t+1}, f̂) ≈ frame_t` plus the mask of pixels
/// that are non-occluded and read inside the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairAlignment {
    pub flow: FlowField,
    pub mask: Tensor,
}

impl PairAlignment {
    pub fn estimate(
        frame_t: &Tensor,
        frame_t1: &Tensor,
        estimator: &impl FlowEstimator,
        threshold: f64,
    ) -> Result<Self> {
        let fwd = estimator.estimate(frame_t, frame_t1)?;
        let bwd = estimator.estimate(frame_t1, frame_t)?;
        let occ = occlusion_map(&fwd, &bwd, threshold)?;
        let inb = fwd.in_bounds_mask();
        let mask = occ.zip_map(&inb, |a, b| a * b)?;
        Ok(Self { flow: fwd, mask })
    }

    pub fn valid_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    fn masked_mean(&self, per_pixel: &Tensor) -> Result<f64> {
        let n = self.valid_pixels();
        if n == 0 {
            return Err(Error::Metric("occlusion mask is empty".into()));
        }
        Ok(per_pixel.sum() / n as f64)
    }

    /// Per-pixel WE, averaged over channels, zero outside the mask.
    pub fn warping_error_map(&self, restored_t: &Tensor, restored_t1: &Tensor) -> Result<Tensor> {
        let (warped, _) = warp(restored_t1, &self.flow)?;
        self.channel_mean_abs(&warped.zip_map(restored_t, |p, q| p - q)?)
    }

    /// Per-pixel RWE, averaged over channels, zero outside the mask.
    pub fn relational_error_map(
        &self,
        restored_t: &Tensor,
        restored_t1: &Tensor,
        reference_t: &Tensor,
        reference_t1: &Tensor,
    ) -> Result<Tensor> {
        let (wr, _) = warp(restored_t1, &self.flow)?;
        let (wg, _) = warp(reference_t1, &self.flow)?;
        let dr = wr.zip_map(restored_t, |p, q| p - q)?;
        let dg = wg.zip_map(reference_t, |p, q| p - q)?;
        self.channel_mean_abs(&dr.zip_map(&dg, |p, q| p - q)?)
    }

    fn channel_mean_abs(&self, diff: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (diff.channels(), diff.height(), diff.width());
        self.mask.expect_shape(crate::tensor::Shape::new(1, h, w))?;
        Ok(Tensor::from_fn(1, h, w, |_, y, x| {
            let m = self.mask.at(0, y, x);
            if m == 0.0 {
                return 0.0;
            }
            (0..c).map(|ch| libm::fabs(diff.at(ch, y, x))).sum::<f64>() / c as f64
        }))
    }

    pub fn warping_error(&self, restored_t: &Tensor, restored_t1: &Tensor) -> Result<f64> {
        self.masked_mean(&self.warping_error_map(restored_t, restored_t1)?)
    }

    pub fn relational_warping_error(
        &self,
        restored_t: &Tensor,
        restored_t1: &Tensor,
        reference_t: &Tensor,
        reference_t1: &Tensor,
    ) -> Result<f64> {
        self.masked_mean(&self.relational_error_map(
            restored_t,
            restored_t1,
            reference_t,
            reference_t1,
        )?)
    }
}

/// WE of a restored pair, with flow and mask estimated on the reference pair.
pub fn warping_error(
    restored_t: &Tensor,
    restored_t1: &Tensor,
    reference_t: &Tensor,
    reference_t1: &Tensor,
) -> Result<f64> {
    PairAlignment::estimate(
        reference_t,
        reference_t1,
        &HornSchunck::default(),
        DEFAULT_OCCLUSION_THRESHOLD,
    )?
    .warping_error(restored_t, restored_t1)
}

/// RWE of a restored pair against the reference pair.
pub fn rwe(
    restored_t: &Tensor,
    restored_t1: &Tensor,
    reference_t: &Tensor,
    reference_t1: &Tensor,
) -> Result<f64> {
    PairAlignment::estimate(
        reference_t,
        reference_t1,
        &HornSchunck::default(),
        DEFAULT_OCCLUSION_THRESHOLD,
    )?
    .relational_warping_error(restored_t, restored_t1, reference_t, reference_t1)
}

/// Mean absolute difference between flows estimated on the restored and on
/// the reference pair, over both components.
pub fn tof_with(
    estimator: &impl FlowEstimator,
    restored_t: &Tensor,
    restored_t1: &Tensor,
    reference_t: &Tensor,
    reference_t1: &Tensor,
) -> Result<f64> {
    let fr = estimator.estimate(restored_t, restored_t1)?;
    let fg = estimator.estimate(reference_t, reference_t1)?;
    Ok(fr.tensor().mean_abs_diff(fg.tensor()))
}

pub fn tof(
    restored_t: &Tensor,
    restored_t1: &Tensor,
    reference_t: &Tensor,
    reference_t1: &Tensor,
) -> Result<f64> {
    tof_with(
        &HornSchunck::default(),
        restored_t,
        restored_t1,
        reference_t,
        reference_t1,
    )
}

/// PSNR in dB for signals in `[0, 1]`; both inputs are clipped first.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape())?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| {
            let d = p.clamp(0.0, 1.0) - q.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(mse)
    })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| libm::exp(-((i as f64 - r) * (i as f64 - r)) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filter over the valid region.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid
/// region, averaged over channels. Frames smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape())?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.channel(ch).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let y: Vec<f64> = b.channel(ch).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &win);
        let (my, _, _) = filter_valid(&y, h, w, &win);
        let (sxx, _, _) = filter_valid(&xx, h, w, &win);
        let (syy, _, _) = filter_valid(&yy, h, w, &win);
        let (sxy, oh, ow) = filter_valid(&xy, h, w, &win);
        let mut s = 0.0;
        for i in 0..oh * ow {
            let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
            let cov = sxy[i] - mx[i] * my[i];
            s += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Which frame pair the WE/RWE flow is estimated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowSource {
    #[default]
    Reference,
    Restored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricOptions {
    pub estimator: HornSchunck,
    pub occlusion_threshold: f64,
    pub flow_source: FlowSource,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            estimator: HornSchunck::default(),
            occlusion_threshold: DEFAULT_OCCLUSION_THRESHOLD,
            flow_source: FlowSource::Reference,
        }
    }
}

/// Metrics of one consecutive frame pair. WE and RWE are `None` when the
/// pair has no valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub we: Option<f64>,
    pub tof: f64,
    pub rwe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub pairs: Vec<PairMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.psnr.iter().copied())
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.ssim.iter().copied())
    }

    pub fn mean_we(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.we))
    }

    pub fn mean_tof(&self) -> Option<f64> {
        mean(self.pairs.iter().map(|p| p.tof))
    }

    pub fn mean_rwe(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.rwe))
    }
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Metric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Every metric for a restored clip against its reference.
pub fn evaluate_clip(
    restored: &[Tensor],
    reference: &[Tensor],
    options: &MetricOptions,
) -> Result<MetricReport> {
    if restored.len() != reference.len() {
        return Err(shape_err!(
            "{} restored frames for {} reference frames",
            restored.len(),
            reference.len()
        ));
    }
    let mut report = MetricReport {
        psnr: Vec::with_capacity(restored.len()),
        ssim: Vec::with_capacity(restored.len()),
        pairs: Vec::new(),
    };
    for (r, g) in restored.iter().zip(reference) {
        report.psnr.push(psnr(r, g)?);
        report.ssim.push(ssim(r, g)?);
    }
    for t in 0..restored.len().saturating_sub(1) {
        let (rt, rt1, gt, gt1) = (
            &restored[t],
            &restored[t + 1],
            &reference[t],
            &reference[t + 1],
        );
        let (src_t, src_t1) = match options.flow_source {
            FlowSource::Reference => (gt, gt1),
            FlowSource::Restored => (rt, rt1),
        };
        let align = PairAlignment::estimate(
            src_t,
            src_t1,
            &options.estimator,
            options.occlusion_threshold,
        )?;
        report.pairs.push(PairMetrics {
            we: optional(align.warping_error(rt, rt1))?,
            tof: tof_with(&options.estimator, rt, rt1, gt, gt1)?,
            rwe: optional(align.relational_warping_error(rt, rt1, gt, gt1))?,
        });
    }
    Ok(report)
}
