//! Differentiable alignment kernels and the two skip-connection modules:
//! attention alignment (blind estimator) and deformable alignment (refiner).

pub mod faam;
pub mod fdam;
pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub use faam::Faam;
pub use fdam::Fdam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Channel-attention reduction ratio.
    pub reduction: usize,
    /// Spatial-attention kernel size.
    pub spatial_kernel: usize,
    /// Deformable kernel size.
    pub dcn_kernel: usize,
    /// Deformable groups; must divide every level's channel width.
    pub groups: usize,
    /// Clamp on regressed residual offsets, pixels at each level.
    pub delta_max: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { reduction: 4, spatial_kernel: 7, dcn_kernel: 3, groups: 8, delta_max: 10.0 }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("alignment reduction ratio must be positive".into()));
        }
        for (name, k) in [("spatial_kernel", self.spatial_kernel), ("dcn_kernel", self.dcn_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("alignment {name} must be odd, got {k}")));
            }
        }
        if self.groups == 0 {
            return Err(Error::Config("deformable groups must be positive".into()));
        }
        if !(self.delta_max.is_finite() && self.delta_max >= 0.0) {
            return Err(Error::Config(format!("delta_max must be finite and non-negative, got {}", self.delta_max)));
        }
        Ok(())
    }
}

/// Checks that features are `[B, channels, h, w]` and flows `[B, 2, h, w]`.
pub(crate) fn check_features<T: Real>(g: &Graph<T>, feats: &[Var], flows: &[Var], channels: usize) -> Result<()> {
    let Some(&first) = feats.first() else {
        return Ok(());
    };
    let [n, _, h, w] = g.value(first).shape();
    for &f in feats {
        let s = g.value(f).shape();
        if s != [n, channels, h, w] {
            return Err(Error::Input(format!("feature shape {s:?} does not match [{n}, {channels}, {h}, {w}]")));
        }
    }
    for &v in flows {
        let s = g.value(v).shape();
        if s != [n, 2, h, w] {
            return Err(Error::Input(format!("flow shape {s:?} does not match features at {h}x{w}")));
        }
    }
    Ok(())
}

/// `out(p) = bilinear(F, p + V(p))` with border clamping.
pub fn backward_warp<T: Real>(f: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, _, h, w] = f.shape();
    if flow.shape() != [n, 2, h, w] {
        return Err(Error::Input(format!("flow shape {:?} does not match features {:?}", flow.shape(), f.shape())));
    }
    Ok(kernels::warp_forward(f, flow))
}

/// Deformable convolution sampling each tap at its grid position plus
/// `base + residual`.
pub fn deformable_sample<T: Real>(
    f: &Tensor<T>,
    base: &Tensor<T>,
    residual: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = f.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("deformable groups {groups} must divide {c} channels")));
    }
    let [_, wc, k, k2] = weight.shape();
    if wc != c || k != k2 || k % 2 == 0 {
        return Err(Error::Input(format!("deformable kernel {:?} does not fit {c} channels", weight.shape())));
    }
    let geo = kernels::DeformGeometry { channels: c, h, w, k, groups };
    let want = [n, geo.offset_channels(), h, w];
    if base.shape() != want || residual.shape() != want {
        return Err(Error::Input(format!("offset fields must be {want:?}")));
    }
    let mut off = base.clone();
    off.add_assign(residual);
    Ok(kernels::deform_forward(f, &off, weight, bias, groups))
}

/// Tiles a `[B, 2, h, w]` flow to every tap of every group.
pub fn base_offsets<T: Real>(flow: &Tensor<T>, groups: usize, k: usize) -> Tensor<T> {
    let [n, _, h, w] = flow.shape();
    let reps = groups * k * k;
    let hw = h * w;
    let mut out = Tensor::zeros([n, 2 * reps, h, w]);
    for s in 0..n {
        for j in 0..2 * reps {
            let src = flow.plane(s, j % 2).to_vec();
            let o = (s * 2 * reps + j) * hw;
            out.data_mut()[o..o + hw].copy_from_slice(&src);
        }
    }
    out
}
