//! im2col convolution kernels.

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` lies
/// inside `[0, w)`.
fn valid_cols(ow: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let off = kx as isize - pad as isize;
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (w as isize) <= off { 0 } else { ((w as isize - off) + s - 1) / s };
    let (lo, hi) = (lo as usize, (hi as usize).min(ow));
    (lo.min(hi), hi)
}

/// Unfold one `[C, H, W]` sample into `[C*k*k, out_h*out_w]` columns.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let h = g.in_h as isize;
    let pad = g.pad as isize;
    let s = g.stride;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(ow, g.in_w, kx, s, g.pad);
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = (lo * s + kx) - g.pad;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` sample.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let h = g.in_h as isize;
    let pad = g.pad as isize;
    let s = g.stride;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(ow, g.in_w, kx, s, g.pad);
                if lo >= hi {
                    continue;
                }
                let ix0 = (lo * s + kx) - g.pad;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    if s == 1 {
                        for (d, &v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, k, k2] = w.shape();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let g = ConvGeometry { in_c: ci, in_h: h, in_w: wd, k, stride, pad };
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let kk = ci * k * k;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * ohw] };
    for s in 0..n {
        let xs = x.sample(s);
        let rhs: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * co * ohw..(s + 1) * co * ohw];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(ohw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        T::gemm(co, kk, ohw, T::one(), w.data(), false, rhs, false, T::one(), dst);
    }
    out
}

/// Gradients of a convolution; `need_x` skips the input gradient when the
/// input does not require one.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let g = ConvGeometry { in_c: ci, in_h: h, in_w: wd, k, stride, pad };
    let ohw = g.out_h() * g.out_w();
    let kk = ci * k * k;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut db = Tensor::zeros([co, 1, 1, 1]);
    let mut cols = vec![T::zero(); kk * ohw];
    let mut dcols = if need_x && !g.is_pointwise() { vec![T::zero(); kk * ohw] } else { Vec::new() };
    for s in 0..n {
        let gy = &grad_out.data()[s * co * ohw..(s + 1) * co * ohw];
        for (o, chunk) in gy.chunks(ohw).enumerate() {
            db.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if g.is_pointwise() {
                x.sample(s)
            } else {
                im2col(x.sample(s), &g, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(co, ohw, kk, T::one(), gy, false, rhs, true, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let chw = ci * h * wd;
            let dst = &mut dx.data_mut()[s * chw..(s + 1) * chw];
            if g.is_pointwise() {
                T::gemm(kk, co, ohw, T::one(), w.data(), true, gy, false, T::one(), dst);
            } else {
                T::gemm(kk, co, ohw, T::one(), w.data(), true, gy, false, T::zero(), &mut dcols);
                col2im(&dcols, &g, dst);
            }
        }
    }
    (dx, dw, db)
}
