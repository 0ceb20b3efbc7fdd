//! Tape-based reverse-mode differentiation over [`Tensor`]s.

use super::conv::{conv2d_backward, conv2d_forward};
use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::alignment::kernels;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Deform { x: Var, offsets: Var, w: Var, b: Option<Var>, groups: usize },
    Warp { f: Var, flow: Var },
    Add(Var, Var),
    Sub(Var, Var),
    MulBroadcast(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    TileChannels { x: Var, reps: usize },
    Upsample2(Var),
    L1Loss(Var, Var),
    L2Loss(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records operations and their results; `backward` walks the tape in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of the first `count` leaves, i.e. the bound parameters.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store.iter().enumerate().map(|(i, (_, t))| self.grads[i].clone().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: 0 }
    }

    /// A graph whose first leaves are the parameters of `store`, so that
    /// `ParamId(i)` resolves to `Var(i)`.
    pub fn with_params(store: &ParamStore<T>, trainable: bool) -> Self {
        let mut g = Self::new();
        for (_, t) in store.iter() {
            g.push(t.clone(), Op::Leaf, trainable);
        }
        g.params = store.len();
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.params, "parameter {id:?} not bound on this graph");
        Var(id.index())
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Deformable convolution; `offsets` already include any base offsets.
    pub fn deform_conv(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>, groups: usize) -> Var {
        let out = kernels::deform_forward(self.value(x), self.value(offsets), self.value(w), b.map(|b| self.value(b)), groups);
        let mut deps = vec![x, offsets, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::Deform { x, offsets, w, b, groups }, ng)
    }

    pub fn warp(&mut self, f: Var, flow: Var) -> Var {
        let out = kernels::warp_forward(self.value(f), self.value(flow));
        let ng = self.needs(&[f, flow]);
        self.push(out, Op::Warp { f, flow }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(self.value(a).shape(), bv.shape(), "sub: shape mismatch");
        let data = self.value(a).data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product; every axis of `b` is either 1 or equal to `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let sa = av.shape();
        let sb = bv.shape();
        for d in 0..4 {
            assert!(sb[d] == 1 || sb[d] == sa[d], "mul_broadcast: {sa:?} vs {sb:?}");
        }
        let mut out = Tensor::zeros(sa);
        {
            let o = out.data_mut();
            let mut idx = 0;
            for n in 0..sa[0] {
                for c in 0..sa[1] {
                    for y in 0..sa[2] {
                        for x in 0..sa[3] {
                            o[idx] = av.data()[idx] * bv.data()[bcast_index(sb, n, c, y, x)];
                            idx += 1;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MulBroadcast(a, b), ng)
    }

    /// `a * s` for a single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|v| v * sv);
        let ng = self.needs(&[a, s]);
        self.push(out, Op::MulScalarVar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::from_f64_lossy(k);
        let out = self.value(a).map(|v| v * kt);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let out = self.value(a).map(|v| if v > T::zero() { v } else { v * s });
        let ng = self.needs(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        let out = self.value(a).map(|v| v.max(l).min(h));
        let ng = self.needs(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let [n, c, h, w] = v.shape();
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for s in 0..n {
            for ch in 0..c {
                out.data_mut()[s * c + ch] = v.plane(s, ch).iter().copied().sum::<T>() * inv;
            }
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::GlobalAvgPool(a), ng)
    }

    pub fn channel_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let [n, c, h, w] = v.shape();
        let inv = T::one() / T::from_usize(c).unwrap();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for s in 0..n {
            let dst = &mut out.data_mut()[s * h * w..(s + 1) * h * w];
            for ch in 0..c {
                for (d, &x) in dst.iter_mut().zip(v.plane(s, ch)) {
                    *d += x;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::ChannelMean(a), ng)
    }

    pub fn channel_max(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let [n, c, h, w] = v.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for s in 0..n {
            let dst = &mut out.data_mut()[s * h * w..(s + 1) * h * w];
            dst.copy_from_slice(v.plane(s, 0));
            for ch in 1..c {
                for (d, &x) in dst.iter_mut().zip(v.plane(s, ch)) {
                    if x > *d {
                        *d = x;
                    }
                }
            }
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::ChannelMax(a), ng)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let [n, _, h, w] = self.value(parts[0]).shape();
        let total_c: usize = parts.iter().map(|&p| self.value(p).c()).sum();
        let mut out = Tensor::zeros([n, total_c, h, w]);
        let hw = h * w;
        for s in 0..n {
            let mut c0 = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!([pv.n(), pv.h(), pv.w()], [n, h, w], "concat: shape mismatch");
                let pc = pv.c();
                let dst = &mut out.data_mut()[(s * total_c + c0) * hw..(s * total_c + c0 + pc) * hw];
                dst.copy_from_slice(pv.sample(s));
                c0 += pc;
            }
        }
        let ng = self.needs(parts);
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for s in 0..n {
            out.data_mut()[s * len * hw..(s + 1) * len * hw]
                .copy_from_slice(&v.data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::SliceChannels { x, start }, ng)
    }

    /// Repeat the channel block `reps` times: output channel `j` is input `j % C`.
    pub fn tile_channels(&mut self, x: Var, reps: usize) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let mut out = Tensor::zeros([n, c * reps, h, w]);
        let chw = c * h * w;
        for s in 0..n {
            for r in 0..reps {
                let off = s * reps * chw + r * chw;
                out.data_mut()[off..off + chw].copy_from_slice(v.sample(s));
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::TileChannels { x, reps }, ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for s in 0..n {
            for ch in 0..c {
                let src = v.plane(s, ch);
                let off = (s * c + ch) * 4 * h * w;
                let dst = &mut out.data_mut()[off..off + 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "l1_loss: shape mismatch");
        let sum: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs().to_f64_lossy()).sum();
        let out = Tensor::scalar(T::from_f64_lossy(sum / p.numel() as f64));
        let ng = self.needs(&[pred, target]);
        self.push(out, Op::L1Loss(pred, target), ng)
    }

    /// Mean squared error.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "l2_loss: shape mismatch");
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64_lossy();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::from_f64_lossy(sum / p.numel() as f64));
        let ng = self.needs(&[pred, target]);
        self.push(out, Op::L2Loss(pred, target), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar node");
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, op: &Op, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(self.value(x), self.value(w), g, stride, pad, self.ng(x), self.ng(w));
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if let Some(b) = b {
                    let shape = self.value(b).shape();
                    self.accumulate(grads, b, Tensor::from_vec(shape, db.into_vec()));
                }
            }
            Op::Deform { x, offsets, w, b, groups } => {
                let r = kernels::deform_backward(
                    self.value(x),
                    self.value(offsets),
                    self.value(w),
                    groups,
                    g,
                    [self.ng(x), self.ng(offsets), self.ng(w)],
                );
                if let Some(d) = r.x {
                    self.accumulate(grads, x, d);
                }
                if let Some(d) = r.offsets {
                    self.accumulate(grads, offsets, d);
                }
                if let Some(d) = r.weight {
                    self.accumulate(grads, w, d);
                }
                if let Some(b) = b {
                    let shape = self.value(b).shape();
                    self.accumulate(grads, b, Tensor::from_vec(shape, r.bias.into_vec()));
                }
            }
            Op::Warp { f, flow } => {
                let (df, dv) = kernels::warp_backward(self.value(f), self.value(flow), g, self.ng(f), self.ng(flow));
                if let Some(df) = df {
                    self.accumulate(grads, f, df);
                }
                if let Some(dv) = dv {
                    self.accumulate(grads, flow, dv);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let sa = av.shape();
                let sb = bv.shape();
                let mut da = self.ng(a).then(|| Tensor::zeros(sa));
                let mut db = self.ng(b).then(|| Tensor::zeros(sb));
                let mut idx = 0;
                for n in 0..sa[0] {
                    for c in 0..sa[1] {
                        for y in 0..sa[2] {
                            for x in 0..sa[3] {
                                let bi = bcast_index(sb, n, c, y, x);
                                let gv = g.data()[idx];
                                if let Some(da) = da.as_mut() {
                                    da.data_mut()[idx] = gv * bv.data()[bi];
                                }
                                if let Some(db) = db.as_mut() {
                                    db.data_mut()[bi] += gv * av.data()[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    self.accumulate(grads, a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, b, db);
                }
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.value(s).item();
                if self.ng(a) {
                    self.accumulate(grads, a, g.map(|v| v * sv));
                }
                if self.ng(s) {
                    let dot: T = g.data().iter().zip(self.value(a).data()).map(|(&x, &y)| x * y).sum();
                    self.accumulate(grads, s, Tensor::from_vec(self.value(s).shape(), vec![dot]));
                }
            }
            Op::Scale(a, k) => {
                let kt = T::from_f64_lossy(k);
                self.accumulate(grads, a, g.map(|v| v * kt));
            }
            Op::LeakyRelu(a, slope) => {
                let s = T::from_f64_lossy(slope);
                let av = self.value(a);
                let data = av.data().iter().zip(g.data()).map(|(&x, &gv)| if x > T::zero() { gv } else { gv * s }).collect();
                self.accumulate(grads, a, Tensor::from_vec(av.shape(), data));
            }
            Op::Sigmoid(a) => {
                let data = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                self.accumulate(grads, a, Tensor::from_vec(out.shape(), data));
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
                let av = self.value(a);
                let data =
                    av.data().iter().zip(g.data()).map(|(&x, &gv)| if x >= l && x <= h { gv } else { T::zero() }).collect();
                self.accumulate(grads, a, Tensor::from_vec(av.shape(), data));
            }
            Op::GlobalAvgPool(a) => {
                let [n, c, h, w] = self.value(a).shape();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut d = Tensor::zeros([n, c, h, w]);
                for (i, chunk) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let gv = g.data()[i] * inv;
                    chunk.iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, a, d);
            }
            Op::ChannelMean(a) => {
                let [n, c, h, w] = self.value(a).shape();
                let inv = T::one() / T::from_usize(c).unwrap();
                let hw = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    let gs = &g.data()[s * hw..(s + 1) * hw];
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for (dv, &gv) in d.data_mut()[off..off + hw].iter_mut().zip(gs) {
                            *dv = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::ChannelMax(a) => {
                let av = self.value(a);
                let [n, c, h, w] = av.shape();
                let hw = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for i in 0..hw {
                        let mut best = 0;
                        for ch in 1..c {
                            if av.plane(s, ch)[i] > av.plane(s, best)[i] {
                                best = ch;
                            }
                        }
                        d.data_mut()[(s * c + best) * hw + i] = g.data()[s * hw + i];
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::Concat(ref parts) => {
                let [n, total_c, h, w] = out.shape();
                let hw = h * w;
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).c();
                    if self.ng(p) {
                        let mut d = Tensor::zeros([n, pc, h, w]);
                        for s in 0..n {
                            d.data_mut()[s * pc * hw..(s + 1) * pc * hw]
                                .copy_from_slice(&g.data()[(s * total_c + c0) * hw..(s * total_c + c0 + pc) * hw]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    c0 += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(x).shape();
                let len = out.c();
                let hw = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    d.data_mut()[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                self.accumulate(grads, x, d);
            }
            Op::TileChannels { x, reps } => {
                let shape = self.value(x).shape();
                let chw = shape[1] * shape[2] * shape[3];
                let mut d = Tensor::zeros(shape);
                for s in 0..shape[0] {
                    for r in 0..reps {
                        let src = &g.data()[s * reps * chw + r * chw..s * reps * chw + (r + 1) * chw];
                        for (dv, &gv) in d.data_mut()[s * chw..(s + 1) * chw].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(x).shape();
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let gp = g.plane(s, ch);
                        let off = (s * c + ch) * h * w;
                        let dst = &mut d.data_mut()[off..off + h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::L1Loss(p, t) => {
                let (pv, tv) = (self.value(p), self.value(t));
                let scale = g.item() / T::from_usize(pv.numel()).unwrap();
                let data: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let dp = Tensor::from_vec(pv.shape(), data);
                if self.ng(t) {
                    self.accumulate(grads, t, dp.map(|v| -v));
                }
                self.accumulate(grads, p, dp);
            }
            Op::L2Loss(p, t) => {
                let (pv, tv) = (self.value(p), self.value(t));
                let scale = g.item() * T::from_f64_lossy(2.0) / T::from_usize(pv.numel()).unwrap();
                let data: Vec<T> = pv.data().iter().zip(tv.data()).map(|(&a, &b)| (a - b) * scale).collect();
                let dp = Tensor::from_vec(pv.shape(), data);
                if self.ng(t) {
                    self.accumulate(grads, t, dp.map(|v| -v));
                }
                self.accumulate(grads, p, dp);
            }
        }
    }
}

#[inline]
fn bcast_index(sb: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    let n = if sb[0] == 1 { 0 } else { n };
    let c = if sb[1] == 1 { 0 } else { c };
    let y = if sb[2] == 1 { 0 } else { y };
    let x = if sb[3] == 1 { 0 } else { x };
    ((n * sb[1] + c) * sb[2] + y) * sb[3] + x
}
