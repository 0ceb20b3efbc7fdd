//! Differentiable sampling kernels: flow-guided backward warping and
//! deformable convolution.
//!
//! Flow and offset fields store the horizontal component first: channel 0 is
//! `dx`, channel 1 is `dy`. Deformable offsets are laid out as
//! `[N, G*K*K*2, H, W]` with channel `(g*K*K + tap)*2 + {0: dx, 1: dy}`.

use crate::autograd::{Real, Tensor};

/// `floor` without a libm call; exact for magnitudes below 2^52.
#[inline]
fn fast_floor<T: Real>(v: T) -> T {
    let t = v.to_f64_lossy();
    let i = t as i64 as f64;
    T::from_f64_lossy(if i > t { i - 1.0 } else { i })
}

/// Border-clamped bilinear lookup. Returns the value and its derivatives with
/// respect to the (unclamped) sample coordinates.
#[inline]
fn sample_clamped<T: Real>(plane: &[T], h: usize, w: usize, px: T, py: T) -> (T, T, T) {
    let zero = T::zero();
    let maxx = T::from_usize(w - 1).unwrap();
    let maxy = T::from_usize(h - 1).unwrap();
    let (cx, gx_live) = clamp_coord(px, maxx);
    let (cy, gy_live) = clamp_coord(py, maxy);
    let x0 = fast_floor(cx);
    let y0 = fast_floor(cy);
    let fx = cx - x0;
    let fy = cy - y0;
    let x0i = x0.to_usize().unwrap();
    let y0i = y0.to_usize().unwrap();
    let x1i = (x0i + 1).min(w - 1);
    let y1i = (y0i + 1).min(h - 1);
    let v00 = plane[y0i * w + x0i];
    let v01 = plane[y0i * w + x1i];
    let v10 = plane[y1i * w + x0i];
    let v11 = plane[y1i * w + x1i];
    let one = T::one();
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    let val = top + (bot - top) * fy;
    let dx = if gx_live && x1i != x0i { (v01 - v00) * (one - fy) + (v11 - v10) * fy } else { zero };
    let dy = if gy_live && y1i != y0i { bot - top } else { zero };
    (val, dx, dy)
}

#[inline]
fn clamp_coord<T: Real>(p: T, max: T) -> (T, bool) {
    if p < T::zero() {
        (T::zero(), false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    }
}

/// Scatter `g` into the four bilinear taps of a border-clamped lookup.
#[inline]
fn scatter_clamped<T: Real>(plane: &mut [T], h: usize, w: usize, px: T, py: T, g: T) {
    let maxx = T::from_usize(w - 1).unwrap();
    let maxy = T::from_usize(h - 1).unwrap();
    let (cx, _) = clamp_coord(px, maxx);
    let (cy, _) = clamp_coord(py, maxy);
    let x0 = fast_floor(cx);
    let y0 = fast_floor(cy);
    let fx = cx - x0;
    let fy = cy - y0;
    let x0i = x0.to_usize().unwrap();
    let y0i = y0.to_usize().unwrap();
    let x1i = (x0i + 1).min(w - 1);
    let y1i = (y0i + 1).min(h - 1);
    let one = T::one();
    plane[y0i * w + x0i] += g * (one - fx) * (one - fy);
    plane[y0i * w + x1i] += g * fx * (one - fy);
    plane[y1i * w + x0i] += g * (one - fx) * fy;
    plane[y1i * w + x1i] += g * fx * fy;
}

/// `out(p) = F(p + V(p))` with bilinear interpolation and border clamping.
pub fn warp_forward<T: Real>(f: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = f.shape();
    assert_eq!(flow.shape(), [n, 2, h, w], "warp: flow shape mismatch");
    let mut out = Tensor::zeros(f.shape());
    let hw = h * w;
    for s in 0..n {
        let fx = flow.plane(s, 0);
        let fy = flow.plane(s, 1);
        for ch in 0..c {
            let plane = f.plane(s, ch);
            let dst = &mut out.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let px = T::from_usize(x).unwrap() + fx[i];
                    let py = T::from_usize(y).unwrap() + fy[i];
                    dst[i] = sample_clamped(plane, h, w, px, py).0;
                }
            }
        }
    }
    out
}

pub fn warp_backward<T: Real>(
    f: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_f: bool,
    need_flow: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, h, w] = f.shape();
    let hw = h * w;
    let mut df = need_f.then(|| Tensor::zeros(f.shape()));
    let mut dflow = need_flow.then(|| Tensor::zeros(flow.shape()));
    for s in 0..n {
        for ch in 0..c {
            let plane = f.plane(s, ch);
            let g = grad_out.plane(s, ch);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let gi = g[i];
                    if gi == T::zero() {
                        continue;
                    }
                    let px = T::from_usize(x).unwrap() + flow.plane(s, 0)[i];
                    let py = T::from_usize(y).unwrap() + flow.plane(s, 1)[i];
                    if let Some(df) = df.as_mut() {
                        let off = (s * c + ch) * hw;
                        scatter_clamped(&mut df.data_mut()[off..off + hw], h, w, px, py, gi);
                    }
                    if let Some(dv) = dflow.as_mut() {
                        let (_, ddx, ddy) = sample_clamped(plane, h, w, px, py);
                        let d = dv.data_mut();
                        d[(s * 2) * hw + i] += gi * ddx;
                        d[(s * 2 + 1) * hw + i] += gi * ddy;
                    }
                }
            }
        }
    }
    (df, dflow)
}

/// Corner indices and weights of one zero-filled bilinear lookup; corners
/// outside the plane carry `usize::MAX` and contribute nothing.
#[derive(Debug, Clone, Copy)]
struct Bilinear<T> {
    idx: [usize; 4],
    fx: T,
    fy: T,
}

const OUTSIDE: usize = usize::MAX;

impl<T: Real> Bilinear<T> {
    #[inline]
    fn at(h: usize, w: usize, px: T, py: T) -> Self {
        let x0 = fast_floor(px);
        let y0 = fast_floor(py);
        let (fx, fy) = (px - x0, py - y0);
        let (Some(x0i), Some(y0i)) = (x0.to_isize(), y0.to_isize()) else {
            return Self { idx: [OUTSIDE; 4], fx: T::zero(), fy: T::zero() };
        };
        let at = |yy: isize, xx: isize| {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                OUTSIDE
            } else {
                yy as usize * w + xx as usize
            }
        };
        Self { idx: [at(y0i, x0i), at(y0i, x0i + 1), at(y0i + 1, x0i), at(y0i + 1, x0i + 1)], fx, fy }
    }

    #[inline]
    fn corners(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| if i == OUTSIDE { T::zero() } else { plane[i] })
    }

    #[inline]
    fn value(&self, plane: &[T]) -> T {
        let [v00, v01, v10, v11] = self.corners(plane);
        let top = v00 + (v01 - v00) * self.fx;
        let bot = v10 + (v11 - v10) * self.fx;
        top + (bot - top) * self.fy
    }

    /// Derivatives of the value with respect to the sample coordinates.
    #[inline]
    fn grad(&self, plane: &[T]) -> (T, T) {
        let [v00, v01, v10, v11] = self.corners(plane);
        let one = T::one();
        let dx = (v01 - v00) * (one - self.fy) + (v11 - v10) * self.fy;
        let top = v00 + (v01 - v00) * self.fx;
        let bot = v10 + (v11 - v10) * self.fx;
        (dx, bot - top)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        let one = T::one();
        let (fx, fy) = (self.fx, self.fy);
        let ws = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
        for (i, wt) in self.idx.into_iter().zip(ws) {
            if i != OUTSIDE {
                plane[i] += g * wt;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeformGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub groups: usize,
}

impl DeformGeometry {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    pub fn offset_channels(&self) -> usize {
        self.groups * self.k * self.k * 2
    }
}

/// Sample position of tap `(ky, kx)` at output pixel `i`.
#[inline]
fn tap_position<T: Real>(geo: &DeformGeometry, off: &[T], g: usize, ky: usize, kx: usize, i: usize) -> (T, T) {
    let hw = geo.h * geo.w;
    let tap = ky * geo.k + kx;
    let base = (g * geo.k * geo.k + tap) * 2;
    let (y, x) = (i / geo.w, i % geo.w);
    let px = T::from_isize(x as isize + kx as isize - geo.pad()).unwrap() + off[base * hw + i];
    let py = T::from_isize(y as isize + ky as isize - geo.pad()).unwrap() + off[(base + 1) * hw + i];
    (px, py)
}

/// Bilinear lookups for every `(group, tap, pixel)`, indexed
/// `(g*K*K + tap)*H*W + i`.
fn deform_plan<T: Real>(off: &[T], geo: &DeformGeometry) -> Vec<Bilinear<T>> {
    let hw = geo.h * geo.w;
    let mut plan = Vec::with_capacity(geo.groups * geo.k * geo.k * hw);
    for g in 0..geo.groups {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                for i in 0..hw {
                    let (px, py) = tap_position(geo, off, g, ky, kx, i);
                    plan.push(Bilinear::at(geo.h, geo.w, px, py));
                }
            }
        }
    }
    plan
}

/// Deformable unfold of one sample: `cols[(c*K + ky)*K + kx, p]` holds the
/// zero-filled bilinear sample of channel `c` at the tap's displaced position.
pub fn deform_im2col<T: Real>(x: &[T], off: &[T], geo: &DeformGeometry, cols: &mut [T]) {
    unfold_planned(x, &deform_plan(off, geo), geo, cols);
}

fn unfold_planned<T: Real>(x: &[T], plan: &[Bilinear<T>], geo: &DeformGeometry, cols: &mut [T]) {
    let hw = geo.h * geo.w;
    let kk = geo.k * geo.k;
    let per_group = geo.channels / geo.groups;
    for c in 0..geo.channels {
        let g = c / per_group;
        let plane = &x[c * hw..(c + 1) * hw];
        for tap in 0..kk {
            let row = c * kk + tap;
            let dst = &mut cols[row * hw..(row + 1) * hw];
            let lookups = &plan[(g * kk + tap) * hw..(g * kk + tap + 1) * hw];
            for (v, b) in dst.iter_mut().zip(lookups) {
                *v = b.value(plane);
            }
        }
    }
}

pub fn deform_forward<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [co, wc, k, _] = weight.shape();
    assert_eq!(wc, c, "deform: kernel/input channel mismatch");
    let geo = DeformGeometry { channels: c, h, w, k, groups };
    assert_eq!(offsets.shape(), [n, geo.offset_channels(), h, w], "deform: offset shape");
    let hw = h * w;
    let kk = c * k * k;
    let mut cols = vec![T::zero(); kk * hw];
    let mut out = Tensor::zeros([n, co, h, w]);
    for s in 0..n {
        deform_im2col(x.sample(s), offsets.sample(s), &geo, &mut cols);
        let dst = &mut out.data_mut()[s * co * hw..(s + 1) * co * hw];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        T::gemm(co, kk, hw, T::one(), weight.data(), false, &cols, false, T::one(), dst);
    }
    out
}

pub struct DeformGrads<T> {
    pub x: Option<Tensor<T>>,
    pub offsets: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub fn deform_backward<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    groups: usize,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> DeformGrads<T> {
    let [n, c, h, w] = x.shape();
    let [co, _, k, _] = weight.shape();
    let geo = DeformGeometry { channels: c, h, w, k, groups };
    let hw = h * w;
    let kk = c * k * k;
    let per_group = c / groups;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut doff = need[1].then(|| Tensor::zeros(offsets.shape()));
    let mut dw = need[2].then(|| Tensor::zeros(weight.shape()));
    let mut db = Tensor::zeros([co, 1, 1, 1]);
    let mut cols = vec![T::zero(); kk * hw];
    let mut dcols = vec![T::zero(); kk * hw];
    for s in 0..n {
        let gy = &grad_out.data()[s * co * hw..(s + 1) * co * hw];
        for (o, chunk) in gy.chunks(hw).enumerate() {
            db.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        let xs = x.sample(s);
        let plan = deform_plan(offsets.sample(s), &geo);
        if let Some(dw) = dw.as_mut() {
            unfold_planned(xs, &plan, &geo, &mut cols);
            T::gemm(co, hw, kk, T::one(), gy, false, &cols, true, T::one(), dw.data_mut());
        }
        if dx.is_none() && doff.is_none() {
            continue;
        }
        T::gemm(kk, co, hw, T::one(), weight.data(), true, gy, false, T::zero(), &mut dcols);
        let off_len = geo.offset_channels() * hw;
        let taps = k * k;
        for ch in 0..c {
            let g = ch / per_group;
            let plane = &xs[ch * hw..(ch + 1) * hw];
            for tap in 0..taps {
                let row = ch * taps + tap;
                let base = (g * taps + tap) * 2;
                let lookups = &plan[(g * taps + tap) * hw..(g * taps + tap + 1) * hw];
                for (i, b) in lookups.iter().enumerate() {
                    let gv = dcols[row * hw + i];
                    if gv == T::zero() {
                        continue;
                    }
                    if let Some(dx) = dx.as_mut() {
                        b.scatter(&mut dx.data_mut()[s * c * hw + ch * hw..s * c * hw + (ch + 1) * hw], gv);
                    }
                    if let Some(doff) = doff.as_mut() {
                        let (ddx, ddy) = b.grad(plane);
                        let d = &mut doff.data_mut()[s * off_len..(s + 1) * off_len];
                        d[base * hw + i] += gv * ddx;
                        d[(base + 1) * hw + i] += gv * ddy;
                    }
                }
            }
        }
    }
    DeformGrads { x: dx, offsets: doff, weight: dw, bias: db }
}
