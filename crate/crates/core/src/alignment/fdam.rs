//! Flow-guided deformable alignment: per-neighbour deformable sampling with
//! flow base offsets and clamped regressed residuals, fused and added to the
//! centre feature through a learnable scale `beta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

use super::{check_features, AlignConfig};

const SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fdam {
    pub channels: usize,
    pub neighbors: usize,
    pub kernel: usize,
    pub groups: usize,
    pub delta_max: f64,
    pub offset_hidden: (ParamId, ParamId),
    pub offset_out: (ParamId, ParamId),
    pub deform: (ParamId, ParamId),
    pub fuse: (ParamId, ParamId),
    pub beta: ParamId,
}

impl Fdam {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        neighbors: usize,
        cfg: &AlignConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if neighbors == 0 || channels == 0 {
            return Err(Error::Config("FDAM needs at least one neighbour and one channel".into()));
        }
        if cfg.groups == 0 || !channels.is_multiple_of(cfg.groups) {
            return Err(Error::Config(format!("deformable groups {} must divide the channel width {channels}", cfg.groups)));
        }
        let k = cfg.dcn_kernel;
        let off_c = 2 * cfg.groups * k * k;
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            let w = store.add_conv(&format!("{prefix}.{name}.w"), o, i, k, rng);
            let b = store.add_zeros(&format!("{prefix}.{name}.b"), [1, o, 1, 1]);
            (w, b)
        };
        let offset_hidden = conv("offset_hidden", channels, 3 * channels + 2, 3);
        let offset_out = conv("offset_out", off_c, channels, 3);
        let deform = conv("deform", channels, channels, k);
        let fuse = conv("fuse", channels, neighbors * channels, 1);
        // Residual offsets start at zero so sampling begins at the flow.
        store.get_mut(offset_out.0).data_mut().iter_mut().for_each(|v| *v = T::zero());
        let beta = store.add_zeros(&format!("{prefix}.beta"), [1, 1, 1, 1]);
        Ok(Self {
            channels,
            neighbors,
            kernel: k,
            groups: cfg.groups,
            delta_max: cfg.delta_max,
            offset_hidden,
            offset_out,
            deform,
            fuse,
            beta,
        })
    }

    /// Clamped residual offsets for one neighbour.
    pub fn residual_offsets<T: Real>(&self, g: &mut Graph<T>, center: Var, neighbor: Var, flow: Var) -> Var {
        let warped = g.warp(neighbor, flow);
        let cat = g.concat(&[center, neighbor, warped, flow]);
        let (w1, b1) = (g.param(self.offset_hidden.0), g.param(self.offset_hidden.1));
        let h = g.conv2d(cat, w1, Some(b1), 1, 1);
        let h = g.leaky_relu(h, SLOPE);
        let (w2, b2) = (g.param(self.offset_out.0), g.param(self.offset_out.1));
        let r = g.conv2d(h, w2, Some(b2), 1, 1);
        g.clamp(r, -self.delta_max, self.delta_max)
    }

    /// Deformable sampling of one neighbour at flow base offsets plus the
    /// clamped residual.
    pub fn align_neighbor<T: Real>(&self, g: &mut Graph<T>, center: Var, neighbor: Var, flow: Var) -> Var {
        let residual = self.residual_offsets(g, center, neighbor, flow);
        let base = g.tile_channels(flow, self.groups * self.kernel * self.kernel);
        let offsets = g.add(base, residual);
        let (wd, bd) = (g.param(self.deform.0), g.param(self.deform.1));
        g.deform_conv(neighbor, offsets, wd, Some(bd), self.groups)
    }

    /// `F_t + beta * fuse(cat(aligned neighbours))`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, center: Var, neighbors: &[Var], flows: &[Var]) -> Result<Var> {
        if neighbors.len() != self.neighbors || flows.len() != self.neighbors {
            return Err(Error::Config(format!(
                "FDAM built for {} neighbours received {} features and {} flows",
                self.neighbors,
                neighbors.len(),
                flows.len()
            )));
        }
        check_features(g, &[center], &[], self.channels)?;
        check_features(g, neighbors, flows, self.channels)?;
        if g.value(center).shape() != g.value(neighbors[0]).shape() {
            return Err(Error::Input("centre and neighbour features differ in shape".into()));
        }
        let aligned: Vec<Var> = neighbors.iter().zip(flows).map(|(&f, &v)| self.align_neighbor(g, center, f, v)).collect();
        let cat = g.concat(&aligned);
        let (wf, bf) = (g.param(self.fuse.0), g.param(self.fuse.1));
        let fused = g.conv2d(cat, wf, Some(bf), 1, 0);
        let beta = g.param(self.beta);
        let scaled = g.mul_scalar_var(fused, beta);
        Ok(g.add(center, scaled))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.offset_hidden.0,
            self.offset_hidden.1,
            self.offset_out.0,
            self.offset_out.1,
            self.deform.0,
            self.deform.1,
            self.fuse.0,
            self.fuse.1,
            self.beta,
        ]
    }
}
