//! Flow-guided attention alignment: warp every neighbour to the centre, gate
//! the stack with channel then spatial attention, aggregate with a 1x1 conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

use super::{check_features, AlignConfig};

/// Intermediate gates of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FaamTrace {
    /// `[B, N*C, 1, 1]`.
    pub channel_gate: Var,
    /// `[B, 1, h, w]`.
    pub spatial_gate: Var,
    pub output: Var,
}

/// Parameter handles of one FAAM instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Faam {
    pub channels: usize,
    pub neighbors: usize,
    pub ca_squeeze: (ParamId, ParamId),
    pub ca_excite: (ParamId, ParamId),
    pub spatial: (ParamId, ParamId),
    pub aggregate: (ParamId, ParamId),
    pub spatial_kernel: usize,
}

impl Faam {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        neighbors: usize,
        cfg: &AlignConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if neighbors == 0 || channels == 0 {
            return Err(Error::Config("FAAM needs at least one neighbour and one channel".into()));
        }
        let stacked = neighbors * channels;
        let hidden = (stacked / cfg.reduction.max(1)).max(1);
        let k = cfg.spatial_kernel;
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            let w = store.add_conv(&format!("{prefix}.{name}.w"), o, i, k, rng);
            let b = store.add_zeros(&format!("{prefix}.{name}.b"), [1, o, 1, 1]);
            (w, b)
        };
        Ok(Self {
            channels,
            neighbors,
            ca_squeeze: conv("ca_squeeze", hidden, stacked, 1),
            ca_excite: conv("ca_excite", stacked, hidden, 1),
            spatial: conv("spatial", 1, 2, k),
            aggregate: conv("aggregate", channels, stacked, 1),
            spatial_kernel: k,
        })
    }

    /// Fuses `neighbors` (each `[B, C, h, w]`) warped by `flows` (each
    /// `[B, 2, h, w]`). The centre feature is not an argument.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, neighbors: &[Var], flows: &[Var]) -> Result<Var> {
        if neighbors.len() != self.neighbors || flows.len() != self.neighbors {
            return Err(Error::Config(format!(
                "FAAM built for {} neighbours received {} features and {} flows",
                self.neighbors,
                neighbors.len(),
                flows.len()
            )));
        }
        check_features(g, neighbors, flows, self.channels)?;
        let warped: Vec<Var> = neighbors.iter().zip(flows).map(|(&f, &v)| g.warp(f, v)).collect();
        let stacked = g.concat(&warped);
        Ok(self.attend_and_aggregate(g, stacked))
    }

    /// Attention and aggregation over an already stacked `[B, N*C, h, w]` map.
    pub fn attend_and_aggregate<T: Real>(&self, g: &mut Graph<T>, stacked: Var) -> Var {
        self.trace(g, stacked).output
    }

    /// As [`Faam::attend_and_aggregate`], also returning both gates.
    pub fn trace<T: Real>(&self, g: &mut Graph<T>, stacked: Var) -> FaamTrace {
        let pooled = g.global_avg_pool(stacked);
        let (w1, b1) = (g.param(self.ca_squeeze.0), g.param(self.ca_squeeze.1));
        let s = g.conv2d(pooled, w1, Some(b1), 1, 0);
        let s = g.relu(s);
        let (w2, b2) = (g.param(self.ca_excite.0), g.param(self.ca_excite.1));
        let e = g.conv2d(s, w2, Some(b2), 1, 0);
        let channel_gate = g.sigmoid(e);
        let x = g.mul_broadcast(stacked, channel_gate);
        let mean = g.channel_mean(x);
        let max = g.channel_max(x);
        let maps = g.concat(&[mean, max]);
        let (ws, bs) = (g.param(self.spatial.0), g.param(self.spatial.1));
        let sa = g.conv2d(maps, ws, Some(bs), 1, self.spatial_kernel / 2);
        let spatial_gate = g.sigmoid(sa);
        let x = g.mul_broadcast(x, spatial_gate);
        let (wa, ba) = (g.param(self.aggregate.0), g.param(self.aggregate.1));
        let output = g.conv2d(x, wa, Some(ba), 1, 0);
        FaamTrace { channel_gate, spatial_gate, output }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.ca_squeeze.0,
            self.ca_squeeze.1,
            self.ca_excite.0,
            self.ca_excite.1,
            self.spatial.0,
            self.spatial.1,
            self.aggregate.0,
            self.aggregate.1,
        ]
    }
}
