//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly and records
//! its operands; [`Graph::backward`] walks the tape in reverse. Nodes that do
//! not depend on an input or parameter are marked constant and skipped.

use alloc::vec;
use alloc::vec::Vec;

use crate::degrade::isp::IspParams;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BilinearTap, Padding};
use crate::linalg::{gemm, MatRef};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of a Charbonnier norm: `(a, b, optional mask)`. A mask with one
/// channel broadcasts over all channels of `a`.
pub type NormTerm = (Var, Var, Option<Tensor>);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        padding: Padding,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    DeformConv3 {
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
    },
    Warp {
        x: Var,
        flow: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    DepthToSpace2 {
        x: Var,
    },
    Isp {
        x: Var,
        params: IspParams,
    },
    Charbonnier {
        terms: Vec<NormTerm>,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The graph leaf for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, pad, Padding::Zero)
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Var> {
        check_bias(self, w, b)?;
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            padding,
        )?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                padding,
            },
            rg,
        ))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2. `w` is `(ci, co, 4)`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h == 0 || ws.c != xs.c || ws.w != 4 {
            return Err(shape_err!(
                "transposed conv weight {:?} vs input {:?}",
                ws,
                xs
            ));
        }
        let co = ws.h;
        if let Some(b) = b {
            if self.shape(b) != Shape::new(co, 1, 1) {
                return Err(shape_err!("bias {:?} for {co} outputs", self.shape(b)));
            }
        }
        let hw = xs.plane();
        let mut y = vec![0.0; co * 4 * hw];
        gemm(
            co * 4,
            xs.c,
            hw,
            MatRef::transposed(self.value(w).data(), co * 4),
            MatRef::row_major(self.value(x).data(), hw),
            0.0,
            &mut y,
        );
        let mut out = Tensor::zeros(co, 2 * xs.h, 2 * xs.w);
        for o in 0..co {
            let bias = b.map_or(0.0, |b| self.value(b).data()[o]);
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let row = &y[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for yy in 0..xs.h {
                    for xx in 0..xs.w {
                        out.set(o, 2 * yy + dy, 2 * xx + dx, row[yy * xs.w + xx] + bias);
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvTranspose2 { x, w, b }, rg))
    }

    /// Deformable 3×3 convolution (stride 1, replicate border). `offsets` has
    /// 18 channels: for tap `k = ky·3 + kx`, channel `2k` is the horizontal and
    /// `2k + 1` the vertical displacement of that tap's read position.
    pub fn deform_conv3(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>) -> Result<Var> {
        check_bias(self, w, b)?;
        let xs = self.shape(x);
        let os = self.shape(offsets);
        if os != Shape::new(18, xs.h, xs.w) {
            return Err(shape_err!("offsets {:?} for input {:?}", os, xs));
        }
        let geom = kernels::conv_geom(self.value(x), self.value(w), 1, 1)?;
        if geom.k != 3 {
            return Err(shape_err!("deformable conv expects a 3x3 kernel"));
        }
        let col = deform_columns(self.value(x), self.value(offsets));
        let out = kernels::conv_from_columns(&col, &geom, self.value(w), b.map(|b| self.value(b)));
        let rg = self.any_grad(&[x, offsets, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::DeformConv3 { x, offsets, w, b }, rg))
    }

    /// Backward bilinear warp: output(p) = x(p + flow(p)), replicate border.
    pub fn warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let (out, _) = kernels::warp_values(self.value(x), self.value(flow))?;
        let rg = self.any_grad(&[x, flow]);
        Ok(self.push(out, Op::Warp { x, flow }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.requires_grad(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product; `b` may broadcast along any axis of size 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = |x: usize, y: usize| x == y || y == 1;
        if !(ok(sa.c, sb.c) && ok(sa.h, sb.h) && ok(sa.w, sb.w)) {
            return Err(shape_err!("cannot broadcast {:?} onto {:?}", sb, sa));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(sa.c, sa.h, sa.w, |c, y, x| {
            av.at(c, y, x) * bv.at(bidx(sb.c, c), bidx(sb.h, y), bidx(sb.w, x))
        });
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { x, k }, rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.channels(), 1, 1, |c, _, _| {
            xv.channel(c).iter().sum::<f64>() / xv.shape().plane() as f64
        });
        let rg = self.requires_grad(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels() as f64;
        let out = Tensor::from_fn(1, xv.height(), xv.width(), |_, y, xx| {
            (0..xv.channels()).map(|ch| xv.at(ch, y, xx)).sum::<f64>() / c
        });
        let rg = self.requires_grad(x);
        self.push(out, Op::ChannelMean { x }, rg)
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w) = (xv.height(), xv.width());
        let mut out = Tensor::zeros(1, h, w);
        let mut argmax = vec![0u32; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut best = (0, xv.at(0, y, xx));
                for ch in 1..xv.channels() {
                    let v = xv.at(ch, y, xx);
                    if v > best.1 {
                        best = (ch, v);
                    }
                }
                out.set(0, y, xx, best.1);
                argmax[y * w + xx] = best.0 as u32;
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::ChannelMax { x, argmax }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avg_pool2(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// `(4c, h, w) → (c, 2h, 2w)`; input channel `4c' + 2dy + dx` lands at
    /// output `(c', 2y + dy, 2x + dx)`.
    pub fn depth_to_space2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.c % 4 != 0 {
            return Err(shape_err!(
                "depth_to_space2 needs channels divisible by 4, got {}",
                xs.c
            ));
        }
        let xv = self.value(x);
        let out = Tensor::from_fn(xs.c / 4, 2 * xs.h, 2 * xs.w, |c, y, xx| {
            xv.at(c * 4 + (y % 2) * 2 + xx % 2, y / 2, xx / 2)
        });
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::DepthToSpace2 { x }, rg))
    }

    pub fn isp(&mut self, x: Var, params: &IspParams) -> Result<Var> {
        let out = params.apply(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            out,
            Op::Isp {
                x,
                params: params.clone(),
            },
            rg,
        ))
    }

    /// `sqrt(Σ_terms Σ mask·(a − b)² + eps²)` as a `(1, 1, 1)` scalar.
    pub fn charbonnier(&mut self, terms: Vec<NormTerm>, eps: f64) -> Result<Var> {
        let mut ss = 0.0;
        for (a, b, mask) in &terms {
            let (av, bv) = (self.value(*a), self.value(*b));
            av.expect_shape(bv.shape())?;
            match mask {
                None => {
                    ss += av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>();
                }
                Some(m) => {
                    check_mask(m, av.shape())?;
                    for_each_masked(av.shape(), m, |i, mv| {
                        let d = av.data()[i] - bv.data()[i];
                        ss += mv * d * d;
                    });
                }
            }
        }
        let value = libm::sqrt(ss + eps * eps);
        let vars: Vec<Var> = terms.iter().flat_map(|(a, b, _)| [*a, *b]).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(value), Op::Charbonnier { terms }, rg))
    }

    /// `Σ k_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, k) in terms {
            if self.shape(v) != Shape::new(1, 1, 1) {
                return Err(shape_err!(
                    "weighted_sum expects scalars, got {:?}",
                    self.shape(v)
                ));
            }
            acc += k * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(self.value(root).map(|_| 1.0));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |v: Var, g: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                padding,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geom = kernels::conv_geom(xv, wv, *stride, *pad)?;
                let col = kernels::im2col(xv.data(), &geom, *padding);
                let want_dx = self.requires_grad(*x);
                let (dw, db, dcol) = kernels::conv_columns_backward(&col, &geom, wv, gout, want_dx);
                if let Some(dcol) = dcol {
                    let mut dx = Tensor::zeros_like(xv);
                    kernels::col2im_add(&dcol, &geom, *padding, dx.data_mut());
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let xs = xv.shape();
                let co = wv.height();
                let hw = xs.plane();
                let mut dy = vec![0.0; co * 4 * hw];
                for o in 0..co {
                    for d in 0..4 {
                        let (ddy, ddx) = (d / 2, d % 2);
                        for yy in 0..xs.h {
                            for xx in 0..xs.w {
                                dy[(o * 4 + d) * hw + yy * xs.w + xx] =
                                    gout.at(o, 2 * yy + ddy, 2 * xx + ddx);
                            }
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros_like(xv);
                    gemm(
                        xs.c,
                        co * 4,
                        hw,
                        MatRef::row_major(wv.data(), co * 4),
                        MatRef::row_major(&dy, hw),
                        0.0,
                        dx.data_mut(),
                    );
                    acc(*x, dx);
                }
                let mut dw = Tensor::zeros_like(wv);
                gemm(
                    xs.c,
                    hw,
                    co * 4,
                    MatRef::row_major(xv.data(), hw),
                    MatRef::transposed(&dy, hw),
                    0.0,
                    dw.data_mut(),
                );
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, channel_sums(gout));
                }
            }
            Op::DeformConv3 { x, offsets, w, b } => {
                let (xv, ov, wv) = (self.value(*x), self.value(*offsets), self.value(*w));
                let geom = kernels::conv_geom(xv, wv, 1, 1)?;
                let col = deform_columns(xv, ov);
                let want = self.requires_grad(*x) || self.requires_grad(*offsets);
                let (dw, db, dcol) = kernels::conv_columns_backward(&col, &geom, wv, gout, want);
                if let Some(dcol) = dcol {
                    let (dx, doff) = deform_columns_backward(xv, ov, &dcol);
                    acc(*x, dx);
                    acc(*offsets, doff);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Warp { x, flow } => {
                let (xv, fv) = (self.value(*x), self.value(*flow));
                let (c, h, w) = (xv.channels(), xv.height(), xv.width());
                let plane = h * w;
                let mut dx = Tensor::zeros_like(xv);
                let mut dflow = Tensor::zeros_like(fv);
                for y in 0..h {
                    for xx in 0..w {
                        let p = y * w + xx;
                        let tap = BilinearTap::new(
                            h,
                            w,
                            y as f64 + fv.data()[plane + p],
                            xx as f64 + fv.data()[p],
                        );
                        let (mut gu, mut gv) = (0.0, 0.0);
                        for ch in 0..c {
                            let g = gout.data()[ch * plane + p];
                            tap.scatter(&mut dx.data_mut()[ch * plane..(ch + 1) * plane], g);
                            let (px, py) = tap.position_grad(xv.channel(ch));
                            gu += g * px;
                            gv += g * py;
                        }
                        dflow.data_mut()[p] = gu;
                        dflow.data_mut()[plane + p] = gv;
                    }
                }
                acc(*x, dx);
                acc(*flow, dflow);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                acc(
                    *x,
                    xv.zip_map(gout, |v, g| if v >= 0.0 { g } else { slope * g })?,
                );
            }
            Op::Sigmoid { x } => {
                acc(*x, node.value.zip_map(gout, |s, g| g * s * (1.0 - s))?);
            }
            Op::Add { a, b } => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, gout.clone());
                acc(*b, gout.scale(-1.0));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let da = Tensor::from_fn(sa.c, sa.h, sa.w, |c, y, x| {
                    gout.at(c, y, x) * bv.at(bidx(sb.c, c), bidx(sb.h, y), bidx(sb.w, x))
                });
                let mut db = Tensor::zeros_like(bv);
                for c in 0..sa.c {
                    for y in 0..sa.h {
                        for x in 0..sa.w {
                            let i = db.index(bidx(sb.c, c), bidx(sb.h, y), bidx(sb.w, x));
                            db.data_mut()[i] += gout.at(c, y, x) * av.at(c, y, x);
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale { x, k } => acc(*x, gout.scale(*k)),
            Op::Concat { parts } => {
                let mut from = 0;
                for p in parts {
                    let c = self.shape(*p).c;
                    acc(*p, gout.channels_slice(from, from + c));
                    from += c;
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let n = s.plane() as f64;
                acc(
                    *x,
                    Tensor::from_fn(s.c, s.h, s.w, |c, _, _| gout.data()[c] / n),
                );
            }
            Op::ChannelMean { x } => {
                let s = self.shape(*x);
                let n = s.c as f64;
                acc(
                    *x,
                    Tensor::from_fn(s.c, s.h, s.w, |_, y, xx| gout.at(0, y, xx) / n),
                );
            }
            Op::ChannelMax { x, argmax } => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s.c, s.h, s.w);
                for (p, &c) in argmax.iter().enumerate() {
                    dx.data_mut()[c as usize * s.plane() + p] = gout.data()[p];
                }
                acc(*x, dx);
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                acc(
                    *x,
                    Tensor::from_fn(s.c, s.h, s.w, |c, y, xx| 0.25 * gout.at(c, y / 2, xx / 2)),
                );
            }
            Op::Upsample2 { x } => {
                let s = self.shape(*x);
                let taps = kernels::upsample2_taps(s.h, s.w);
                let mut dx = Tensor::zeros(s.c, s.h, s.w);
                for c in 0..s.c {
                    let g = gout.channel(c);
                    let d = dx.channel_mut(c);
                    for (tap, &gv) in taps.iter().zip(g) {
                        tap.scatter(d, gv);
                    }
                }
                acc(*x, dx);
            }
            Op::DepthToSpace2 { x } => {
                let s = self.shape(*x);
                acc(
                    *x,
                    Tensor::from_fn(s.c, s.h, s.w, |c, y, xx| {
                        gout.at(c / 4, 2 * y + (c % 4) / 2, 2 * xx + c % 2)
                    }),
                );
            }
            Op::Isp { x, params } => acc(*x, params.backward(self.value(*x), gout)?),
            Op::Charbonnier { terms } => {
                let s = node.value.item();
                let k = gout.item() / s;
                for (a, b, mask) in terms {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = av.zip_map(bv, |p, q| k * (p - q))?;
                    if let Some(m) = mask {
                        let shape = da.shape();
                        let mut masked = Tensor::zeros(shape.c, shape.h, shape.w);
                        for_each_masked(shape, m, |i, mv| masked.data_mut()[i] = mv * da.data()[i]);
                        da = masked;
                    }
                    let db = da.scale(-1.0);
                    acc(*a, da);
                    acc(*b, db);
                }
            }
            Op::WeightedSum { terms } => {
                let g = gout.item();
                for &(v, k) in terms {
                    acc(v, Tensor::scalar(k * g));
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add the gradient of every parameter leaf in `graph` into `out`.
    pub fn accumulate_params(&self, graph: &Graph, out: &mut ParamGrads) {
        for (pid, var) in graph.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = self.get(*v) {
                    out.accumulate(ParamId(pid), g);
                }
            }
        }
    }
}

#[inline]
fn bidx(n: usize, i: usize) -> usize {
    if n == 1 {
        0
    } else {
        i
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

fn channel_sums(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.channels(), 1, 1, |c, _, _| t.channel(c).iter().sum())
}

fn check_bias(g: &Graph, w: Var, b: Option<Var>) -> Result<()> {
    if let Some(b) = b {
        let co = g.shape(w).c;
        if g.shape(b) != Shape::new(co, 1, 1) {
            return Err(shape_err!("bias {:?} for {co} output channels", g.shape(b)));
        }
    }
    Ok(())
}

fn check_mask(m: &Tensor, shape: Shape) -> Result<()> {
    if m.height() != shape.h
        || m.width() != shape.w
        || !(m.channels() == 1 || m.channels() == shape.c)
    {
        return Err(Error::Shape(alloc::format!(
            "mask {:?} for {:?}",
            m.shape(),
            shape
        )));
    }
    Ok(())
}

fn for_each_masked(shape: Shape, m: &Tensor, mut f: impl FnMut(usize, f64)) {
    let plane = shape.plane();
    for c in 0..shape.c {
        let mc = if m.channels() == 1 { 0 } else { c };
        let mplane = m.channel(mc);
        for (p, &mv) in mplane.iter().enumerate() {
            if mv != 0.0 {
                f(c * plane + p, mv);
            }
        }
    }
}

fn deform_taps(h: usize, w: usize, offsets: &Tensor) -> Vec<BilinearTap> {
    let plane = h * w;
    let mut taps = Vec::with_capacity(9 * plane);
    for k in 0..9 {
        let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        let (ou, ov) = (offsets.channel(2 * k), offsets.channel(2 * k + 1));
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                taps.push(BilinearTap::new(
                    h,
                    w,
                    y as f64 + ky + ov[p],
                    x as f64 + kx + ou[p],
                ));
            }
        }
    }
    taps
}

/// Column matrix `(ci·9) × (h·w)` of bilinear reads at the offset tap positions.
fn deform_columns(x: &Tensor, offsets: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let plane = h * w;
    let taps = deform_taps(h, w, offsets);
    let mut col = vec![0.0; c * 9 * plane];
    for ch in 0..c {
        let src = x.channel(ch);
        for k in 0..9 {
            let row = &mut col[(ch * 9 + k) * plane..(ch * 9 + k + 1) * plane];
            for (dst, tap) in row.iter_mut().zip(&taps[k * plane..(k + 1) * plane]) {
                *dst = tap.sample(src);
            }
        }
    }
    col
}

fn deform_columns_backward(x: &Tensor, offsets: &Tensor, dcol: &[f64]) -> (Tensor, Tensor) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let plane = h * w;
    let taps = deform_taps(h, w, offsets);
    let mut dx = Tensor::zeros_like(x);
    let mut doff = Tensor::zeros_like(offsets);
    for ch in 0..c {
        for k in 0..9 {
            let row = &dcol[(ch * 9 + k) * plane..(ch * 9 + k + 1) * plane];
            let src = x.channel(ch);
            for (p, (&g, tap)) in row
                .iter()
                .zip(&taps[k * plane..(k + 1) * plane])
                .enumerate()
            {
                if g == 0.0 {
                    continue;
                }
                tap.scatter(&mut dx.data_mut()[ch * plane..(ch + 1) * plane], g);
                let (gx, gy) = tap.position_grad(src);
                doff.data_mut()[2 * k * plane + p] += g * gx;
                doff.data_mut()[(2 * k + 1) * plane + p] += g * gy;
            }
        }
    }
    (dx, doff)
}
