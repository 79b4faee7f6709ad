//! Reverse-mode differentiation over a flat tape of coarse ops.
//!
//! Activations are channels-last `[N, F, H, W, C]`. Each op records what its
//! backward pass needs; an inference tape skips those caches.

mod conv;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Token axis of an attention op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnAxis {
    /// Tokens are the `H·W` positions of one frame.
    Spatial,
    /// Tokens are the `F` frames at one spatial position.
    Temporal,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    f: usize,
    h: usize,
    w: usize,
    ci: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    fo: usize,
    ho: usize,
    wo: usize,
    co: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.fo * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kt * self.kh * self.kw * self.ci
    }

    fn pointwise(&self) -> bool {
        self.kt == 1 && self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddChannelBias { x: Var, bias: Var },
    Concat { a: Var, b: Var },
    Upsample { x: Var },
    Attention { qkv: Var, axis: AttnAxis, heads: usize, probs: Vec<T> },
    Mse { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn as5(t: &Tensor<impl Copy>) -> Result<[usize; 5]> {
    t.shape().try_into().map_err(|_| shape_err(format!("expected [N, F, H, W, C], got {:?}", t.shape())))
}

impl<T: Real> Tape<T> {
    /// A tape that records backward caches.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// Forward-only tape.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: self.record });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 3D convolution with `[kt, kh, kw, Ci, Co]` weights, "same" padding
    /// (`k/2` per axis) and spatial stride `stride` (frames are never strided).
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [n, f, h, wd, ci] = as5(self.value(x))?;
        let ws = self.value(w).shape();
        let [kt, kh, kw, wci, co] = <[usize; 5]>::try_from(ws).map_err(|_| shape_err(format!("conv weight must be rank 5, got {ws:?}")))?;
        if wci != ci {
            return Err(shape_err(format!("conv expects {wci} input channels, got {ci}")));
        }
        if self.value(b).shape() != [co] {
            return Err(shape_err(format!("conv bias {:?} vs {co} outputs", self.value(b).shape())));
        }
        if stride == 0 || kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv needs odd kernels and positive stride"));
        }
        let geom = ConvGeom { n, f, h, w: wd, ci, kt, kh, kw, stride, fo: f, ho: (h - 1) / stride + 1, wo: (wd - 1) / stride + 1, co };
        let rows = geom.rows();
        let (xd, wd, bias) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = if geom.pointwise() {
            let mut out = vec![T::zero(); rows * co];
            T::gemm(rows, ci, co, xd, false, wd, false, &mut out, T::zero());
            for row in out.chunks_exact_mut(co) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o = *o + bb;
                }
            }
            out
        } else {
            conv::forward(&geom, xd, wd, bias)
        };
        let value = Tensor::from_vec(&[n, geom.fo, geom.ho, geom.wo, co], out)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, &[x, w, b]))
    }

    /// `x · w + b` over the last axis; `w` is `[D, E]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| shape_err("linear on a scalar".into()))?;
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != d {
            return Err(shape_err(format!("linear weight {ws:?} vs input width {d}")));
        }
        let e = ws[1];
        let rows = self.value(x).len() / d;
        let mut out = vec![T::zero(); rows * e];
        T::gemm(rows, d, e, self.value(x).data(), false, self.value(w).data(), false, &mut out, T::zero());
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != e {
                return Err(shape_err(format!("linear bias {} vs {e} outputs", bias.len())));
            }
            for row in out.chunks_exact_mut(e) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = e;
        let value = Tensor::from_vec(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Group normalization over all non-batch positions and the channels of each group.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let n = xv.shape()[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(shape_err(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!("group norm affine params must be [{c}]")));
        }
        let per_sample = xv.len() / n;
        let positions = per_sample / c;
        let cg = c / groups;
        let count = T::from_f64c((positions * cg) as f64);
        let eps = T::from_f64c(1e-5);
        let data = xv.data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut rstd = vec![T::zero(); n * groups];
        for s in 0..n {
            let base = s * per_sample;
            for g in 0..groups {
                let mut sum = T::zero();
                for p in 0..positions {
                    let o = base + p * c + g * cg;
                    for &v in &data[o..o + cg] {
                        sum = sum + v;
                    }
                }
                let mean = sum / count;
                let mut var = T::zero();
                for p in 0..positions {
                    let o = base + p * c + g * cg;
                    for &v in &data[o..o + cg] {
                        var = var + (v - mean) * (v - mean);
                    }
                }
                let r = T::one() / (var / count + eps).sqrt();
                rstd[s * groups + g] = r;
                for p in 0..positions {
                    let o = base + p * c + g * cg;
                    for i in o..o + cg {
                        xhat[i] = (data[i] - mean) * r;
                    }
                }
            }
        }
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * gm[i % c] + bt[i % c]).collect();
        let value = Tensor::from_vec(xv.shape(), out)?;
        let (xhat, rstd) = if self.record { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, &[x, gamma, beta]))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(value, Op::Silu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a per-sample, per-channel `[N, C]` bias to `[N, ..., C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.shape()[0];
        let c = xv.last_dim();
        if bv.shape() != [n, c] {
            return Err(shape_err(format!("channel bias {:?} for input {:?}", bv.shape(), xv.shape())));
        }
        let per_sample = xv.len() / n;
        let mut data = xv.data().to_vec();
        for s in 0..n {
            let bias_row = &bv.data()[s * c..(s + 1) * c];
            for row in data[s * per_sample..(s + 1) * per_sample].chunks_exact_mut(c) {
                for (o, &bb) in row.iter_mut().zip(bias_row) {
                    *o = *o + bb;
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(value, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err(format!("concat {sa:?} with {sb:?}")));
        }
        let rows = av.len() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = ca + cb;
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Nearest-neighbour ×2 upsampling of height and width.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, f, h, w, c] = as5(self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * f * h * w * c * 4];
        for nf in 0..n * f {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((nf * h + y / 2) * w + xx / 2) * c;
                    let d = ((nf * 2 * h + y) * 2 * w + xx) * c;
                    data[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, f, 2 * h, 2 * w, c], data)?;
        Ok(self.push(value, Op::Upsample { x }, &[x]))
    }

    /// Multi-head softmax attention. `qkv` is `[N, F, H, W, 3C]` packed as
    /// `[q | k | v]`; the result is `[N, F, H, W, C]`.
    pub fn attention(&mut self, qkv: Var, axis: AttnAxis, heads: usize) -> Result<Var> {
        let [n, f, h, w, c3] = as5(self.value(qkv))?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(shape_err(format!("attention width {c3} incompatible with {heads} heads")));
        }
        let c = c3 / 3;
        let layout = AttnLayout::new(axis, n, f, h, w, c);
        let d = c / heads;
        let l = layout.tokens;
        let scale = T::from_f64c(1.0 / (d as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); n * f * h * w * c];
        let mut probs = if self.record { vec![T::zero(); layout.seqs * heads * l * l] } else { Vec::new() };
        let (mut q, mut k, mut v) = (vec![T::zero(); l * d], vec![T::zero(); l * d], vec![T::zero(); l * d]);
        let mut s = vec![T::zero(); l * l];
        let mut o = vec![T::zero(); l * d];
        for seq in 0..layout.seqs {
            for head in 0..heads {
                layout.gather(src, seq, head * d, d, 3, &mut q);
                layout.gather(src, seq, c + head * d, d, 3, &mut k);
                layout.gather(src, seq, 2 * c + head * d, d, 3, &mut v);
                T::gemm(l, d, l, &q, false, &k, true, &mut s, T::zero());
                for row in s.chunks_exact_mut(l) {
                    softmax_row(row, scale);
                }
                T::gemm(l, l, d, &s, false, &v, false, &mut o, T::zero());
                layout.scatter(&mut out, seq, head * d, d, 1, &o, false);
                if self.record {
                    let p0 = (seq * heads + head) * l * l;
                    probs[p0..p0 + l * l].copy_from_slice(&s);
                }
            }
        }
        let value = Tensor::from_vec(&[n, f, h, w, c], out)?;
        Ok(self.push(value, Op::Attention { qkv, axis, heads, probs }, &[qkv]))
    }

    /// Mean squared error as a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err(format!("mse {:?} vs {:?}", p.shape(), t.shape())));
        }
        let sum: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::from_vec(&[1], vec![sum / T::from_f64c(p.len() as f64)])?;
        Ok(self.push(value, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let emit = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv3d { x, w, b, geom } => {
                    let rows = geom.rows();
                    let co = geom.co;
                    let xval = self.value(*x);
                    if needs(*w) {
                        let dw = if geom.pointwise() {
                            let mut dw = vec![T::zero(); geom.patch() * co];
                            T::gemm(geom.patch(), rows, co, xval.data(), true, g.data(), false, &mut dw, T::zero());
                            dw
                        } else {
                            conv::weight_grad(geom, xval.data(), g.data())
                        };
                        emit(&mut grads, *w, Tensor::from_vec(self.value(*w).shape(), dw).expect("shape"));
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); co];
                        for row in g.data().chunks_exact(co) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        emit(&mut grads, *b, Tensor::from_vec(&[co], db).expect("shape"));
                    }
                    if needs(*x) {
                        let dx = if geom.pointwise() {
                            let mut dx = vec![T::zero(); rows * geom.ci];
                            T::gemm(rows, co, geom.ci, g.data(), false, self.value(*w).data(), true, &mut dx, T::zero());
                            dx
                        } else {
                            conv::input_grad(geom, self.value(*w).data(), g.data())
                        };
                        emit(&mut grads, *x, Tensor::from_vec(xval.shape(), dx).expect("shape"));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    let e = g.last_dim();
                    let rows = xv.len() / d;
                    if needs(*w) {
                        let mut dw = vec![T::zero(); d * e];
                        T::gemm(d, rows, e, xv.data(), true, g.data(), false, &mut dw, T::zero());
                        emit(&mut grads, *w, Tensor::from_vec(&[d, e], dw).expect("shape"));
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let mut db = vec![T::zero(); e];
                        for row in g.data().chunks_exact(e) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        emit(&mut grads, b, Tensor::from_vec(&[e], db).expect("shape"));
                    }
                    if needs(*x) {
                        let mut dx = vec![T::zero(); rows * d];
                        T::gemm(rows, e, d, g.data(), false, self.value(*w).data(), true, &mut dx, T::zero());
                        emit(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                    let c = g.last_dim();
                    let n = g.shape()[0];
                    let per_sample = g.len() / n;
                    let positions = per_sample / c;
                    let cg = c / groups;
                    let gm = self.value(*gamma).data();
                    let gd = g.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (i, (&dy, &xh)) in gd.iter().zip(xhat).enumerate() {
                        dgamma[i % c] = dgamma[i % c] + dy * xh;
                        dbeta[i % c] = dbeta[i % c] + dy;
                    }
                    if needs(*x) {
                        let count = T::from_f64c((positions * cg) as f64);
                        let mut dx = vec![T::zero(); gd.len()];
                        for s in 0..n {
                            let base = s * per_sample;
                            for gi in 0..*groups {
                                let (mut a, mut bsum) = (T::zero(), T::zero());
                                for p in 0..positions {
                                    let o = base + p * c + gi * cg;
                                    for j in o..o + cg {
                                        let dxh = gd[j] * gm[j % c];
                                        a = a + dxh;
                                        bsum = bsum + dxh * xhat[j];
                                    }
                                }
                                a = a / count;
                                bsum = bsum / count;
                                let r = rstd[s * groups + gi];
                                for p in 0..positions {
                                    let o = base + p * c + gi * cg;
                                    for j in o..o + cg {
                                        let dxh = gd[j] * gm[j % c];
                                        dx[j] = r * (dxh - a - xhat[j] * bsum);
                                    }
                                }
                            }
                        }
                        emit(&mut grads, *x, Tensor::from_vec(g.shape(), dx).expect("shape"));
                    }
                    if needs(*gamma) {
                        emit(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma).expect("shape"));
                    }
                    if needs(*beta) {
                        emit(&mut grads, *beta, Tensor::from_vec(&[c], dbeta).expect("shape"));
                    }
                }
                Op::Silu { x } => {
                    let xv = self.value(*x).data();
                    let dx = xv
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &dy)| {
                            let s = T::one() / (T::one() + (-v).exp());
                            dy * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    emit(&mut grads, *x, Tensor::from_vec(g.shape(), dx).expect("shape"));
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        emit(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        emit(&mut grads, *b, g);
                    }
                }
                Op::AddChannelBias { x, bias } => {
                    if needs(*bias) {
                        let n = g.shape()[0];
                        let c = g.last_dim();
                        let per_sample = g.len() / n;
                        let mut db = vec![T::zero(); n * c];
                        for s in 0..n {
                            for row in g.data()[s * per_sample..(s + 1) * per_sample].chunks_exact(c) {
                                for (a, &v) in db[s * c..(s + 1) * c].iter_mut().zip(row) {
                                    *a = *a + v;
                                }
                            }
                        }
                        emit(&mut grads, *bias, Tensor::from_vec(&[n, c], db).expect("shape"));
                    }
                    if needs(*x) {
                        emit(&mut grads, *x, g);
                    }
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).last_dim();
                    let cb = self.value(*b).last_dim();
                    let rows = g.len() / (ca + cb);
                    let (mut da, mut db) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                    for row in g.data().chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    if needs(*a) {
                        emit(&mut grads, *a, Tensor::from_vec(self.value(*a).shape(), da).expect("shape"));
                    }
                    if needs(*b) {
                        emit(&mut grads, *b, Tensor::from_vec(self.value(*b).shape(), db).expect("shape"));
                    }
                }
                Op::Upsample { x } => {
                    let [n, f, h, w, c] = as5(self.value(*x)).expect("rank 5");
                    let mut dx = vec![T::zero(); n * f * h * w * c];
                    let gd = g.data();
                    for nf in 0..n * f {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let s = ((nf * h + y / 2) * w + xx / 2) * c;
                                let d = ((nf * 2 * h + y) * 2 * w + xx) * c;
                                for k in 0..c {
                                    dx[s + k] = dx[s + k] + gd[d + k];
                                }
                            }
                        }
                    }
                    emit(&mut grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).expect("shape"));
                }
                Op::Attention { qkv, axis, heads, probs } => {
                    let src = self.value(*qkv);
                    let [n, f, h, w, c3] = as5(src).expect("rank 5");
                    let c = c3 / 3;
                    let layout = AttnLayout::new(*axis, n, f, h, w, c);
                    let d = c / heads;
                    let l = layout.tokens;
                    let scale = T::from_f64c(1.0 / (d as f64).sqrt());
                    let mut dqkv = vec![T::zero(); src.len()];
                    let z = || vec![T::zero(); l * d];
                    let (mut q, mut k, mut v, mut go) = (z(), z(), z(), z());
                    let (mut dq, mut dk, mut dv) = (z(), z(), z());
                    let mut dp = vec![T::zero(); l * l];
                    for seq in 0..layout.seqs {
                        for head in 0..*heads {
                            let p0 = (seq * heads + head) * l * l;
                            let p = &probs[p0..p0 + l * l];
                            layout.gather(src.data(), seq, head * d, d, 3, &mut q);
                            layout.gather(src.data(), seq, c + head * d, d, 3, &mut k);
                            layout.gather(src.data(), seq, 2 * c + head * d, d, 3, &mut v);
                            layout.gather(g.data(), seq, head * d, d, 1, &mut go);
                            // dV = Pᵀ dO, dP = dO Vᵀ
                            T::gemm(l, l, d, p, true, &go, false, &mut dv, T::zero());
                            T::gemm(l, d, l, &go, false, &v, true, &mut dp, T::zero());
                            for (prow, dprow) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                                let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                                for (ds, &pp) in dprow.iter_mut().zip(prow) {
                                    *ds = pp * (*ds - dot) * scale;
                                }
                            }
                            T::gemm(l, l, d, &dp, false, &k, false, &mut dq, T::zero());
                            T::gemm(l, l, d, &dp, true, &q, false, &mut dk, T::zero());
                            layout.scatter(&mut dqkv, seq, head * d, d, 3, &dq, true);
                            layout.scatter(&mut dqkv, seq, c + head * d, d, 3, &dk, true);
                            layout.scatter(&mut dqkv, seq, 2 * c + head * d, d, 3, &dv, true);
                        }
                    }
                    emit(&mut grads, *qkv, Tensor::from_vec(src.shape(), dqkv).expect("shape"));
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = g.data()[0] * T::from_f64c(2.0 / p.len() as f64);
                    let dp: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * scale).collect();
                    if needs(*target) {
                        let dt = dp.iter().map(|&v| -v).collect();
                        emit(&mut grads, *target, Tensor::from_vec(t.shape(), dt).expect("shape"));
                    }
                    if needs(*pred) {
                        emit(&mut grads, *pred, Tensor::from_vec(p.shape(), dp).expect("shape"));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn softmax_row<T: Real>(row: &mut [T], scale: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Index arithmetic for gathering one head of one attention sequence.
struct AttnLayout {
    seqs: usize,
    tokens: usize,
    /// Positions per frame (`H·W`).
    plane: usize,
    frames: usize,
    axis: AttnAxis,
    c: usize,
}

impl AttnLayout {
    fn new(axis: AttnAxis, n: usize, f: usize, h: usize, w: usize, c: usize) -> Self {
        let plane = h * w;
        let (seqs, tokens) = match axis {
            AttnAxis::Spatial => (n * f, plane),
            AttnAxis::Temporal => (n * plane, f),
        };
        Self { seqs, tokens, plane, frames: f, axis, c }
    }

    /// Position index (into `[N·F·H·W]`) of token `t` in sequence `seq`.
    fn position(&self, seq: usize, t: usize) -> usize {
        match self.axis {
            AttnAxis::Spatial => seq * self.plane + t,
            AttnAxis::Temporal => {
                let (n, p) = (seq / self.plane, seq % self.plane);
                (n * self.frames + t) * self.plane + p
            }
        }
    }

    /// Copy `d` channels starting at `offset` from a tensor of width `mult·C`.
    fn gather<T: Copy>(&self, src: &[T], seq: usize, offset: usize, d: usize, mult: usize, dst: &mut [T]) {
        let width = mult * self.c;
        for t in 0..self.tokens {
            let o = self.position(seq, t) * width + offset;
            dst[t * d..(t + 1) * d].copy_from_slice(&src[o..o + d]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter<T: Real>(&self, dst: &mut [T], seq: usize, offset: usize, d: usize, mult: usize, src: &[T], accumulate: bool) {
        let width = mult * self.c;
        for t in 0..self.tokens {
            let o = self.position(seq, t) * width + offset;
            for (a, &b) in dst[o..o + d].iter_mut().zip(&src[t * d..(t + 1) * d]) {
                *a = if accumulate { *a + b } else { b };
            }
        }
    }
}
