use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{axpy, dot, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Silu(Var),
    Add(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Scale(Var, f64),
    Mse { pred: Var, target: Tensor },
    Focal { logits: Var, target: Tensor },
    MaskedL1 { pred: Var, target: Tensor, mask: Tensor, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so gradients can be pulled back through it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameters of a [`ParamSet`] registered as tape leaves.
pub struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name:?}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    wp: usize,
    plane_p: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor) -> Self {
        let (n, ci, h, wd) = x.dims4();
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [co, ci, k, k]");
        assert_eq!(ws[1], ci, "conv expects {} input channels, got {ci}", ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        assert!(k % 2 == 1, "odd kernels only");
        let pad = k / 2;
        let wp = wd + 2 * pad;
        let hp = h + 2 * pad;
        ConvGeom {
            n,
            ci,
            co: ws[0],
            h,
            w: wd,
            k,
            pad,
            wp,
            plane_p: hp * wp + k,
        }
    }

    /// Zero-padded copy of every input plane of sample `n`, with a few
    /// trailing zeros so shifted windows of length `h·wp` stay in bounds.
    fn padded(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ci * self.plane_p];
        for c in 0..self.ci {
            let src = &x[(n * self.ci + c) * self.h * self.w..][..self.h * self.w];
            let dst = &mut out[c * self.plane_p..];
            for y in 0..self.h {
                let row = (y + self.pad) * self.wp + self.pad;
                dst[row..row + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
            }
        }
        out
    }

    fn span(&self) -> usize {
        self.h * self.wp
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let g = ConvGeom::new(x, w);
    let mut out = Tensor::zeros(vec![g.n, g.co, g.h, g.w]);
    let wd = w.data();
    let mut acc = vec![0.0; g.span()];
    for n in 0..g.n {
        let padded = g.padded(x.data(), n);
        for co in 0..g.co {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..g.ci {
                let plane = &padded[ci * g.plane_p..];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wd[((co * g.ci + ci) * g.k + ky) * g.k + kx];
                        if wv != 0.0 {
                            let off = ky * g.wp + kx;
                            axpy(&mut acc, wv, &plane[off..off + g.span()]);
                        }
                    }
                }
            }
            let bias = b.data()[co];
            let dst = &mut out.data_mut()[(n * g.co + co) * g.h * g.w..][..g.h * g.w];
            for y in 0..g.h {
                for xx in 0..g.w {
                    dst[y * g.w + xx] = acc[y * g.wp + xx] + bias;
                }
            }
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::new(x, w);
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros(vec![g.co]);
    let wd = w.data();
    let mut gpad = vec![0.0; g.ci * g.plane_p];
    let mut go = vec![0.0; g.span()];
    for n in 0..g.n {
        let padded = g.padded(x.data(), n);
        gpad.iter_mut().for_each(|v| *v = 0.0);
        for co in 0..g.co {
            let src = &grad.data()[(n * g.co + co) * g.h * g.w..][..g.h * g.w];
            go.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..g.h {
                go[y * g.wp..y * g.wp + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
            }
            gb.data_mut()[co] += src.iter().sum::<f64>();
            for ci in 0..g.ci {
                let plane = &padded[ci * g.plane_p..];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let off = ky * g.wp + kx;
                        let wi = ((co * g.ci + ci) * g.k + ky) * g.k + kx;
                        gw.data_mut()[wi] += dot(&go, &plane[off..off + g.span()]);
                        let wv = wd[wi];
                        if wv != 0.0 {
                            axpy(&mut gpad[ci * g.plane_p + off..][..g.span()], wv, &go);
                        }
                    }
                }
            }
        }
        for ci in 0..g.ci {
            let dst = &mut gx.data_mut()[(n * g.ci + ci) * g.h * g.w..][..g.h * g.w];
            let plane = &gpad[ci * g.plane_p..];
            for y in 0..g.h {
                let row = (y + g.pad) * g.wp + g.pad;
                dst[y * g.w..(y + 1) * g.w].copy_from_slice(&plane[row..row + g.w]);
            }
        }
    }
    (gx, gw, gb)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers every parameter as a leaf, in set order.
    pub fn bind<'a>(&mut self, params: &'a ParamSet) -> Bound<'a> {
        let vars = params.tensors().map(|t| self.leaf(t.clone())).collect();
        Bound {
            vars,
            index: params.index_map(),
        }
    }

    /// Same-padded 2-d convolution, stride 1. `w` is `[co, ci, k, k]`, `b` is `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = conv_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Conv2d { x, w, b })
    }

    /// Per-channel `x·scale + shift`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = *v * s[ch] + t[ch];
            }
        }
        debug_assert_eq!(out.len(), n * c * h * w);
        self.push(out, Op::ChannelAffine { x, scale, shift })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= sigmoid(*v);
        }
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a per-sample, per-channel bias `[n, c]` to every pixel of `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(bias).shape(), &[n, c], "channel bias shape");
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v += bv[i];
            }
        }
        self.push(out, Op::AddChannelBias { x, bias })
    }

    /// 2×2 average pooling; spatial sides must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sides, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(vec![n, c, oh, ow]);
        for (p, (src, dst)) in xv.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)).enumerate() {
            let _ = p;
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * ow + xx] = 0.25 * s;
                }
            }
        }
        self.push(out, Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(vec![n, c, oh, ow]);
        for (src, dst) in xv.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x))
    }

    /// Channel concatenation of two `[n, c, h, w]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat needs matching n, h, w");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        self.push(Tensor::from_vec(vec![n, ca + cb, h, w], data), Op::Concat(a, b))
    }

    /// `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        assert_eq!(wv.shape()[1], fin, "linear input width");
        let mut out = Tensor::zeros(vec![n, fout]);
        for i in 0..n {
            let row = &xv.data()[i * fin..(i + 1) * fin];
            for o in 0..fout {
                out.data_mut()[i * fout + o] = bv.data()[o] + dot(row, &wv.data()[o * fin..(o + 1) * fin]);
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        self.push(out, Op::Scale(x, factor))
    }

    /// Mean squared error against a constant target; a scalar.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let sum: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let loss = sum / p.len() as f64;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target })
    }

    /// Penalty-reduced pixelwise focal loss on heatmap logits. Cells whose
    /// target equals 1 are positives; the sum is divided by the positive
    /// count (at least 1).
    pub fn focal_loss(&mut self, logits: Var, target: Tensor) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), target.shape(), "focal loss shape mismatch");
        let mut sum = 0.0;
        let mut positives = 0usize;
        for (&z, &y) in l.data().iter().zip(target.data()) {
            let p = sigmoid(z);
            if y == 1.0 {
                positives += 1;
                sum += (1.0 - p).powi(2) * softplus(-z);
            } else {
                sum += (1.0 - y).powi(4) * p * p * softplus(z);
            }
        }
        let loss = sum / positives.max(1) as f64;
        self.push(Tensor::scalar(loss), Op::Focal { logits, target })
    }

    /// `Σ mask·|pred − target| / norm`; a scalar.
    pub fn masked_l1(&mut self, pred: Var, target: Tensor, mask: Tensor, norm: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1 shape mismatch");
        assert_eq!(p.shape(), mask.shape(), "l1 mask shape mismatch");
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((a, b), m)| m * (a - b).abs())
            .sum();
        self.push(Tensor::scalar(sum / norm), Op::MaskedL1 { pred, target, mask, norm })
    }

    /// Reverse pass from scalar `loss`. Returns one gradient per node,
    /// `None` where nothing flowed.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = conv_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = self.value(*x);
                    let (_, c, h, w) = xv.dims4();
                    let s = self.value(*scale).data();
                    let mut gx = g.clone();
                    let mut gs = Tensor::zeros(vec![c]);
                    let mut gt = Tensor::zeros(vec![c]);
                    for (i, (gp, xp)) in gx.data_mut().chunks_mut(h * w).zip(xv.data().chunks(h * w)).enumerate() {
                        let ch = i % c;
                        gs.data_mut()[ch] += dot(gp, xp);
                        gt.data_mut()[ch] += gp.iter().sum::<f64>();
                        for v in gp.iter_mut() {
                            *v *= s[ch];
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *scale, gs);
                    acc(&mut grads, *shift, gt);
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let s = sigmoid(xv);
                        *gv *= s * (1.0 + xv * (1.0 - s));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddChannelBias { x, bias } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut gb = Tensor::zeros(vec![n, c]);
                    for (i, plane) in g.data().chunks(h * w).enumerate() {
                        gb.data_mut()[i] = plane.iter().sum();
                    }
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *bias, gb);
                }
                Op::AvgPool2(x) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = Tensor::zeros(xs);
                    for (src, dst) in g.data().chunks(oh * ow).zip(gx.data_mut().chunks_mut(h * w)) {
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = 0.25 * src[(y / 2) * ow + xx / 2];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Upsample2(x) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let ow = 2 * w;
                    let mut gx = Tensor::zeros(xs);
                    for (src, dst) in g.data().chunks(4 * h * w).zip(gx.data_mut().chunks_mut(h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..ow {
                                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = self.value(*a).dims4();
                    let cb = self.value(*b).dims4().1;
                    let plane = h * w;
                    let mut ga = Vec::with_capacity(n * ca * plane);
                    let mut gb = Vec::with_capacity(n * cb * plane);
                    for chunk in g.data().chunks((ca + cb) * plane) {
                        ga.extend_from_slice(&chunk[..ca * plane]);
                        gb.extend_from_slice(&chunk[ca * plane..]);
                    }
                    acc(&mut grads, *a, Tensor::from_vec(vec![n, ca, h, w], ga));
                    acc(&mut grads, *b, Tensor::from_vec(vec![n, cb, h, w], gb));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    let mut gx = Tensor::zeros(vec![n, fin]);
                    let mut gw = Tensor::zeros(vec![fout, fin]);
                    let mut gb = Tensor::zeros(vec![fout]);
                    for i in 0..n {
                        let row = &xv.data()[i * fin..(i + 1) * fin];
                        for o in 0..fout {
                            let go = g.data()[i * fout + o];
                            gb.data_mut()[o] += go;
                            axpy(&mut gw.data_mut()[o * fin..(o + 1) * fin], go, row);
                            axpy(&mut gx.data_mut()[i * fin..(i + 1) * fin], go, &wv.data()[o * fin..(o + 1) * fin]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => {
                    let mut gx = g;
                    for v in gx.data_mut() {
                        *v *= f;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let k = 2.0 * g.item() / p.len() as f64;
                    let data = p.data().iter().zip(target.data()).map(|(a, b)| k * (a - b)).collect();
                    acc(&mut grads, *pred, Tensor::from_vec(p.shape().to_vec(), data));
                }
                Op::Focal { logits, target } => {
                    let l = self.value(*logits);
                    let positives = target.data().iter().filter(|&&y| y == 1.0).count().max(1) as f64;
                    let k = g.item() / positives;
                    let data = l
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&z, &y)| {
                            let p = sigmoid(z);
                            let d = if y == 1.0 {
                                // d/dz of (1-p)^2 * -log p
                                (1.0 - p).powi(2) * (-2.0 * p * softplus(-z) - (1.0 - p))
                            } else {
                                // d/dz of (1-y)^4 p^2 * -log(1-p)
                                (1.0 - y).powi(4) * p * p * (2.0 * (1.0 - p) * softplus(z) + p)
                            };
                            k * d
                        })
                        .collect();
                    acc(&mut grads, *logits, Tensor::from_vec(l.shape().to_vec(), data));
                }
                Op::MaskedL1 { pred, target, mask, norm } => {
                    let p = self.value(*pred);
                    let k = g.item() / norm;
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(mask.data())
                        .map(|((a, b), m)| {
                            let d = a - b;
                            let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                            k * m * s
                        })
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_vec(p.shape().to_vec(), data));
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for bound parameters, zero-filled where nothing flowed.
    pub fn for_params(&self, tape: &Tape, bound: &Bound<'_>) -> Vec<Tensor> {
        bound
            .vars()
            .iter()
            .map(|&v| match self.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(v).shape().to_vec()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, rng::normals(&mut rng::rng(seed), len))
    }

    /// Checks d(loss)/d(leaf) for every leaf against central differences.
    fn check<F>(leaves: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let run = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            (tape, vars, loss)
        };
        let (tape, vars, loss) = run(&leaves);
        let grads = tape.backward(loss);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
            for i in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[i] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[i] -= h;
                let (tp, _, lp) = run(&plus);
                let (tm, _, lm) = run(&minus);
                let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-5, "leaf {li}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3] {
            check(
                vec![rand_tensor(vec![2, 2, 5, 4], 1), rand_tensor(vec![3, 2, k, k], 2), rand_tensor(vec![3], 3)],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2]);
                    t.mse(y, rand_tensor(vec![2, 3, 5, 4], 4))
                },
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(vec![1, 2, 4, 5], 7);
        let w = rand_tensor(vec![1, 2, 3, 3], 8);
        let b = Tensor::from_vec(vec![1], vec![0.25]);
        let out = conv_forward(&x, &w, &b);
        for y in 0..4i64 {
            for xx in 0..5i64 {
                let mut s = 0.25;
                for c in 0..2 {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (iy, ix) = (y + ky - 1, xx + kx - 1);
                            if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                s += w.data()[(c * 3 + ky as usize) * 3 + kx as usize]
                                    * x.data()[(c * 4 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                }
                assert!((out.data()[(y * 5 + xx) as usize] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        check(
            vec![rand_tensor(vec![2, 3, 4, 4], 10), rand_tensor(vec![3], 11), rand_tensor(vec![3], 12), rand_tensor(vec![2, 3], 13)],
            |t, v| {
                let a = t.channel_affine(v[0], v[1], v[2]);
                let s = t.silu(a);
                let b = t.add_channel_bias(s, v[3]);
                let p = t.avg_pool2(b);
                let u = t.upsample2(p);
                let c = t.concat(u, v[0]);
                let r = t.add(c, c);
                let r = t.scale(r, 0.7);
                t.mse(r, rand_tensor(vec![2, 6, 4, 4], 14))
            },
        );
    }

    #[test]
    fn linear_gradients() {
        check(
            vec![rand_tensor(vec![3, 4], 20), rand_tensor(vec![2, 4], 21), rand_tensor(vec![2], 22)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let y = t.silu(y);
                t.mse(y, rand_tensor(vec![3, 2], 23))
            },
        );
    }

    #[test]
    fn focal_and_l1_gradients() {
        let mut target = Tensor::from_vec(vec![1, 1, 3, 3], vec![0.2, 0.5, 0.1, 0.6, 1.0, 0.0, 0.3, 0.7, 0.05]);
        target.data_mut()[2] = 1.0;
        let mask = Tensor::from_vec(vec![1, 2, 3, 3], (0..18).map(|i| f64::from(i % 3 == 0)).collect());
        let l1_target = rand_tensor(vec![1, 2, 3, 3], 31);
        check(vec![rand_tensor(vec![1, 1, 3, 3], 30), rand_tensor(vec![1, 2, 3, 3], 32)], move |t, v| {
            let f = t.focal_loss(v[0], target.clone());
            let l = t.masked_l1(v[1], l1_target.clone(), mask.clone(), 2.0);
            t.add(f, l)
        });
    }

    #[test]
    fn focal_loss_matches_definition() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![1, 1, 1, 2], vec![0.3, -1.2]));
        let y = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 0.4]);
        let loss = tape.focal_loss(z, y);
        let (p0, p1) = (sigmoid(0.3), sigmoid(-1.2));
        let expected = -(1.0 - p0).powi(2) * p0.ln() - 0.6f64.powi(4) * p1 * p1 * (1.0 - p1).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }
}
