use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::quant::{self, Rectifier};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Powf(Var, f32),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    KlDiv {
        logits: Var,
        grad: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        grad: Vec<f32>,
    },
    FakeQuant {
        x: Var,
        scale: Var,
        zero_point: f32,
        qmin: f32,
        qmax: f32,
    },
    AdaRound {
        theta: Var,
        /// d out / d theta, zero where clamped or saturated.
        dtheta: Vec<f32>,
    },
    RoundReg {
        theta: Var,
        dtheta: Vec<f32>,
    },
    DropMix {
        quant: Var,
        fp: Var,
        take_fp: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of the operations in one optimization step.
///
/// Only values that (transitively) depend on a leaf created with
/// `requires_grad = true` receive gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of leaf variables after [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Shorthand for a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn checked(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.checked("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.checked("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.checked("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.checked("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.checked("mul_scalar", v, Op::MulScalar(a, s), &[a])
    }

    /// Elementwise `a^p`.
    pub fn powf(&mut self, a: Var, p: f32) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.checked("powf", v, Op::Powf(a, p), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.checked("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f32;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// `sum((a - b)^2) / rows(a)`: squared L2 distance averaged over the batch.
    pub fn sq_dist_per_sample(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.value(a).rows().max(1) as f32;
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        let s = self.sum(d2)?;
        self.mul_scalar(s, 1.0 / rows)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.checked("relu", v, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(va.data(), vb.data(), &mut out, m, k, n);
        let v = Tensor::new([m, n], out)?;
        self.checked("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `x[B,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 2 || vw.ndim() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::shape("linear", vx.shape(), vw.shape()));
        }
        let (batch, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = vec![0.0; batch * fout];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [fout] {
                return Err(Error::shape("linear bias", vb.shape(), &[fout]));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(vb.data());
            }
        }
        kernels::gemm_bt_acc(vx.data(), vw.data(), &mut out, batch, fin, fout);
        let v = Tensor::new([batch, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.checked("linear", v, Op::Linear { x, w, b }, &inputs)
    }

    /// 2-D convolution of `x[B,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 4 || vw.ndim() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::shape("conv2d", vx.shape(), vw.shape()));
        }
        let (batch, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        let (ho, wo) = match (
            kernels::conv_output_extent(h, kh, stride, pad),
            kernels::conv_output_extent(wd, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: kernel {kh}x{kw} with stride {stride}, pad {pad} does not fit input {h}x{wd}"
                )))
            }
        };
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let bias = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [cout] {
                    return Err(Error::shape("conv2d bias", vb.shape(), &[cout]));
                }
                Some(vb.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(vx.data(), vw.data(), bias, batch, cout, &geom);
        let v = Tensor::new([batch, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.checked("conv2d", v, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Mean over spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 {
            return Err(Error::InvalidArgument(format!("global_avg_pool expects 4 axes, got {:?}", vx.shape())));
        }
        let (b, c, inner) = vx.channel_layout()?;
        let data = vx.data().chunks(inner).map(|ch| ch.iter().sum::<f32>() / inner as f32).collect();
        let v = Tensor::new([b, c], data)?;
        self.checked("global_avg_pool", v, Op::GlobalAvgPool(x), &[x])
    }

    /// Per-channel mean over every axis except axis 1: `[B,C,...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, inner) = vx.channel_layout()?;
        let mut acc = vec![0.0f64; c];
        for (i, chunk) in vx.data().chunks(inner).enumerate() {
            acc[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        let n = (b * inner) as f64;
        let v = Tensor::new([c], acc.into_iter().map(|s| (s / n) as f32).collect())?;
        self.checked("channel_mean", v, Op::ChannelMean(x), &[x])
    }

    /// `x * scale[c] + shift[c]` along axis 1.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, c, inner) = vx.channel_layout()?;
        let (vs, vt) = (self.value(scale), self.value(shift));
        if vs.shape() != [c] || vt.shape() != [c] {
            return Err(Error::shape("channel_affine", vs.shape(), &[c]));
        }
        let mut data = vx.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let (s, t) = (vs.data()[i % c], vt.data()[i % c]);
            for v in chunk {
                *v = *v * s + t;
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        self.checked("channel_affine", v, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// `T^2 * mean_b KL(target_b || softmax(logits_b / T))`, with both
    /// probabilities floored at [`crate::metrics::PROB_FLOOR`].
    pub fn kl_div(&mut self, target_probs: &Tensor, logits: Var, temperature: f32) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape() != target_probs.shape() || vz.ndim() != 2 {
            return Err(Error::shape("kl_div", vz.shape(), target_probs.shape()));
        }
        let (batch, classes) = (vz.shape()[0], vz.shape()[1]);
        let floor = crate::metrics::PROB_FLOOR;
        let ln_floor = floor.ln();
        let mut logq = vec![0.0; classes];
        let mut grad = vec![0.0; batch * classes];
        let mut total = 0.0f64;
        let t2 = temperature * temperature;
        for b in 0..batch {
            let z = &vz.data()[b * classes..(b + 1) * classes];
            let p = &target_probs.data()[b * classes..(b + 1) * classes];
            kernels::log_softmax_row(z, temperature, &mut logq);
            let mut p_live = 0.0f32;
            for c in 0..classes {
                let lp = p[c].max(floor).ln();
                let lq = if logq[c] < ln_floor { ln_floor } else { logq[c] };
                total += (p[c] * (lp - lq)) as f64;
                if logq[c] >= ln_floor {
                    p_live += p[c];
                }
            }
            let g = &mut grad[b * classes..(b + 1) * classes];
            for c in 0..classes {
                let q = logq[c].exp();
                let pc = if logq[c] >= ln_floor { p[c] } else { 0.0 };
                g[c] = t2 / temperature * (q * p_live - pc) / batch as f32;
            }
        }
        let v = Tensor::scalar((total * t2 as f64 / batch as f64) as f32);
        self.checked("kl_div", v, Op::KlDiv { logits, grad }, &[logits])
    }

    /// Mean cross-entropy of `logits[B,C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vz = self.value(logits);
        if vz.ndim() != 2 || vz.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", vz.shape(), &[labels.len()]));
        }
        let (batch, classes) = (vz.shape()[0], vz.shape()[1]);
        let mut logq = vec![0.0; classes];
        let mut grad = vec![0.0; batch * classes];
        let mut total = 0.0f64;
        for (b, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::InvalidArgument(format!("label {y} >= class count {classes}")));
            }
            kernels::log_softmax_row(&vz.data()[b * classes..(b + 1) * classes], 1.0, &mut logq);
            total -= logq[y] as f64;
            for c in 0..classes {
                grad[b * classes + c] = (logq[c].exp() - if c == y { 1.0 } else { 0.0 }) / batch as f32;
            }
        }
        let v = Tensor::scalar((total / batch as f64) as f32);
        self.checked("cross_entropy", v, Op::CrossEntropy { logits, grad }, &[logits])
    }

    /// Per-tensor fake quantization with a learnable one-element `scale`.
    ///
    /// The input gradient is straight-through inside the clamp range and zero
    /// outside; the scale gradient follows the three-branch rule of
    /// [`quant::scale_grad_factor`].
    pub fn fake_quant(&mut self, x: Var, scale: Var, zero_point: f32, qmin: f32, qmax: f32) -> Result<Var> {
        let s = self.value(scale).item()?;
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("fake_quant scale must be > 0, got {s}")));
        }
        let v = self.value(x).map(|v| quant::fake_quant_scalar(v, s, zero_point, qmin, qmax));
        self.checked(
            "fake_quant",
            v,
            Op::FakeQuant {
                x,
                scale,
                zero_point,
                qmin,
                qmax,
            },
            &[x, scale],
        )
    }

    /// Rounding-variable weight quantization with per-output-channel scales.
    ///
    /// `soft` uses the continuous rectified sigmoid; otherwise the rounding
    /// offset is binarized at 0.5 and no gradient flows to `theta`.
    #[allow(clippy::too_many_arguments)]
    pub fn adaround(
        &mut self,
        weight: &Tensor,
        theta: Var,
        scales: &[f32],
        zero_points: &[f32],
        qmin: f32,
        qmax: f32,
        rect: Rectifier,
        soft: bool,
    ) -> Result<Var> {
        let vt = self.value(theta);
        if vt.shape() != weight.shape() {
            return Err(Error::shape("adaround", vt.shape(), weight.shape()));
        }
        let channels = weight.rows();
        if scales.len() != channels || zero_points.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "adaround: {} channels but {} scales / {} zero-points",
                channels,
                scales.len(),
                zero_points.len()
            )));
        }
        let per = weight.row_len();
        let mut out = vec![0.0; weight.numel()];
        let mut dtheta = vec![0.0; weight.numel()];
        for ch in 0..channels {
            let (s, z) = (scales[ch], zero_points[ch]);
            for i in ch * per..(ch + 1) * per {
                let th = vt.data()[i];
                let h = if soft { rect.h(th) } else { rect.hard(th) };
                let raw = (weight.data()[i] / s).floor() + h + z;
                let q = raw.clamp(qmin, qmax);
                out[i] = s * (q - z);
                if soft && raw >= qmin && raw <= qmax {
                    dtheta[i] = s * rect.dh(th);
                }
            }
        }
        let v = Tensor::new(weight.shape().to_vec(), out)?;
        self.checked("adaround", v, Op::AdaRound { theta, dtheta }, &[theta])
    }

    /// `sum(1 - |2 h(theta) - 1|^beta)`.
    pub fn round_reg(&mut self, theta: Var, beta: f32, rect: Rectifier) -> Result<Var> {
        let vt = self.value(theta);
        let mut total = 0.0f64;
        let mut dtheta = vec![0.0; vt.numel()];
        for (d, &th) in dtheta.iter_mut().zip(vt.data()) {
            let (value, grad) = quant::round_reg_term(th, beta, rect);
            total += value as f64;
            *d = grad;
        }
        let v = Tensor::scalar(total as f32);
        self.checked("round_reg", v, Op::RoundReg { theta, dtheta }, &[theta])
    }

    /// Elementwise select: `fp` where `take_fp`, otherwise `quant`.
    pub fn drop_mix(&mut self, quant: Var, fp: Var, take_fp: Vec<bool>) -> Result<Var> {
        let (vq, vf) = (self.value(quant), self.value(fp));
        if vq.shape() != vf.shape() || take_fp.len() != vq.numel() {
            return Err(Error::shape("drop_mix", vq.shape(), vf.shape()));
        }
        let data = vq
            .data()
            .iter()
            .zip(vf.data())
            .zip(&take_fp)
            .map(|((&q, &f), &t)| if t { f } else { q })
            .collect();
        let v = Tensor::new(vq.shape().to_vec(), data)?;
        self.checked("drop_mix", v, Op::DropMix { quant, fp, take_fp }, &[quant, fp])
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("backward on an empty tape"));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.and_then(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).ok())
            })
            .collect();
        Ok(Grads { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(&vb)).for_each(|(d, (&x, &y))| *d += x * y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g.iter().zip(&va)).for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
            Op::MulScalar(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x * k);
                }
            }
            Op::Powf(a, p) => {
                let va = self.value(*a).data().to_vec();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut()
                        .zip(g.iter().zip(&va))
                        .for_each(|(d, (&x, &y))| *d += x * p * y.powf(p - 1.0));
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data().to_vec();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut()
                        .zip(g.iter().zip(&va))
                        .for_each(|(d, (&x, &y))| if y > 0.0 { *d += x });
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let (da, db) = (va.data().to_vec(), vb.data().to_vec());
                if let Some(s) = self.slot(grads, *a) {
                    kernels::gemm_bt_acc(g, &db, s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    kernels::gemm_at_acc(&da, g, s, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                let (dxv, dwv) = (vx.data().to_vec(), vw.data().to_vec());
                if let Some(s) = self.slot(grads, *x) {
                    kernels::gemm_acc(g, &dwv, s, batch, fout, fin);
                }
                if let Some(s) = self.slot(grads, *w) {
                    kernels::gemm_at_acc(g, &dxv, s, batch, fout, fin);
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(grads, *b) {
                        for row in g.chunks(fout) {
                            s.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, cout) = (vx.shape()[0], vw.shape()[0]);
                let (xd, wd) = (vx.data().to_vec(), vw.data().to_vec());
                let mut dx = self.nodes[x.0].requires_grad.then(|| vec![0.0; xd.len()]);
                let mut dw = self.nodes[w.0].requires_grad.then(|| vec![0.0; wd.len()]);
                let mut db = b.filter(|b| self.nodes[b.0].requires_grad).map(|_| vec![0.0; cout]);
                kernels::conv2d_backward(
                    &xd,
                    &wd,
                    g,
                    batch,
                    cout,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(Some(*x), dx), (Some(*w), dw), (*b, db)] {
                    if let (Some(v), Some(d)) = (v, d) {
                        if let Some(s) = self.slot(grads, v) {
                            s.iter_mut().zip(&d).for_each(|(acc, &u)| *acc += u);
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, inner) = self.value(*a).channel_layout()?;
                if let Some(s) = self.slot(grads, *a) {
                    for (chunk, &gv) in s.chunks_mut(inner).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv / inner as f32);
                    }
                }
            }
            Op::ChannelMean(a) => {
                let (b, c, inner) = self.value(*a).channel_layout()?;
                let n = (b * inner) as f32;
                if let Some(s) = self.slot(grads, *a) {
                    for (i, chunk) in s.chunks_mut(inner).enumerate() {
                        let gv = g[i % c] / n;
                        chunk.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let vx = self.value(*x);
                let (_, c, inner) = vx.channel_layout()?;
                let xd = vx.data().to_vec();
                let sd = self.value(*scale).data().to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for (i, (chunk, gchunk)) in s.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                        let k = sd[i % c];
                        chunk.iter_mut().zip(gchunk).for_each(|(d, &gv)| *d += gv * k);
                    }
                }
                if let Some(s) = self.slot(grads, *scale) {
                    for (i, (xc, gchunk)) in xd.chunks(inner).zip(g.chunks(inner)).enumerate() {
                        s[i % c] += xc.iter().zip(gchunk).map(|(&a, &b)| a * b).sum::<f32>();
                    }
                }
                if let Some(s) = self.slot(grads, *shift) {
                    for (i, gchunk) in g.chunks(inner).enumerate() {
                        s[i % c] += gchunk.iter().sum::<f32>();
                    }
                }
            }
            Op::KlDiv { logits, grad } | Op::CrossEntropy { logits, grad } => {
                if let Some(s) = self.slot(grads, *logits) {
                    s.iter_mut().zip(grad).for_each(|(d, &v)| *d += v * g[0]);
                }
            }
            Op::FakeQuant {
                x,
                scale,
                zero_point,
                qmin,
                qmax,
            } => {
                let sv = self.value(*scale).data()[0];
                let xd = self.value(*x).data().to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, &gv), &xv) in s.iter_mut().zip(g).zip(&xd) {
                        let u = xv / sv + zero_point;
                        if u > *qmin && u < *qmax {
                            *d += gv;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *scale) {
                    let total: f32 = g
                        .iter()
                        .zip(&xd)
                        .map(|(&gv, &xv)| gv * quant::scale_grad_factor(xv, sv, *zero_point, *qmin, *qmax))
                        .sum();
                    s[0] += total;
                }
            }
            Op::AdaRound { theta, dtheta } => {
                if let Some(s) = self.slot(grads, *theta) {
                    s.iter_mut().zip(dtheta.iter().zip(g)).for_each(|(d, (&k, &gv))| *d += k * gv);
                }
            }
            Op::RoundReg { theta, dtheta } => {
                if let Some(s) = self.slot(grads, *theta) {
                    s.iter_mut().zip(dtheta).for_each(|(d, &k)| *d += k * g[0]);
                }
            }
            Op::DropMix { quant, fp, take_fp } => {
                if let Some(s) = self.slot(grads, *quant) {
                    for ((d, &gv), &t) in s.iter_mut().zip(g).zip(take_fp) {
                        if !t {
                            *d += gv;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *fp) {
                    for ((d, &gv), &t) in s.iter_mut().zip(g).zip(take_fp) {
                        if t {
                            *d += gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
