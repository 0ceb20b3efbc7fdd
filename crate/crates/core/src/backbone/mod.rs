//! The shared multi-level U-Net. Frames are encoded independently; temporal
//! fusion happens only in the skip connections.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignConfig, Faam, Fdam};
use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::{label_key, rng_for};

/// LeakyReLU slope used throughout the backbone (zero is a fixed point).
pub const SLOPE: f64 = 0.1;
pub const CHECKPOINT_KIND: &str = "model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sees only the neighbours of the centre frame.
    Blind,
    /// Sees the centre frame as well.
    Nonblind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    Faam,
    Fdam,
    /// Channel-stacked frames through one stream with plain skips.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `cat(x̂, r)` per frame; the network predicts a residual.
    Joint,
    /// The noisy frame itself; the network predicts the frame.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub mode: Mode,
    pub skip: SkipKind,
    pub input: InputKind,
    /// Data channels `Ch` (3 for sRGB, 4 for packed raw).
    pub data_channels: usize,
    /// Level-0 width `C`.
    pub width: usize,
    pub levels: usize,
    /// Temporal window `T`.
    pub window: usize,
    pub align: AlignConfig,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.data_channels == 0 || self.width == 0 || self.levels == 0 {
            return Err(Error::Config("data channels, width and levels must be positive".into()));
        }
        crate::synth::window::check_window_size(self.window)?;
        self.align.validate()?;
        if self.skip == SkipKind::Fdam && !self.width.is_multiple_of(self.align.groups) {
            return Err(Error::Config(format!("deformable groups {} must divide the width {}", self.align.groups, self.width)));
        }
        Ok(())
    }

    /// `C * min(2^l, 4)`.
    pub fn level_width(&self, level: usize) -> usize {
        self.width * (1usize << level.min(2))
    }

    pub fn frame_channels(&self) -> usize {
        match self.input {
            InputKind::Joint => 2 * self.data_channels,
            InputKind::Raw => self.data_channels,
        }
    }

    pub fn neighbors(&self) -> usize {
        self.window - 1
    }

    /// Frames entering the network.
    pub fn streams(&self) -> usize {
        match self.mode {
            Mode::Blind => self.window - 1,
            Mode::Nonblind => self.window,
        }
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Real>(s: &mut ParamStore<T>, name: &str, o: usize, i: usize, k: usize, rng: &mut impl Rng) -> Self {
        let w = s.add_conv(&format!("{name}.w"), o, i, k, rng);
        let b = s.add_zeros(&format!("{name}.b"), [1, o, 1, 1]);
        Self { w, b }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var, stride: usize) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let k = g.value(w).shape()[2];
        g.conv2d(x, w, Some(b), stride, k / 2)
    }

    fn apply_act<T: Real>(&self, g: &mut Graph<T>, x: Var, stride: usize) -> Var {
        let y = self.apply(g, x, stride);
        g.leaky_relu(y, SLOPE)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncLevel {
    down: Option<Conv>,
    c1: Conv,
    c2: Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecLevel {
    up: Conv,
    c1: Conv,
    c2: Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Skip {
    Faam(Faam),
    Fdam(Fdam),
    Direct,
}

/// Architecture, parameters and parameter handles of one network.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub arch: Arch,
    pub params: ParamStore<f32>,
    head: Conv,
    enc: Vec<EncLevel>,
    skips: Vec<Skip>,
    /// Indexed by level `0..L-1`.
    dec: Vec<DecLevel>,
    tail: Conv,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl ModelState {
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(&[seed, label_key("model-init")]);
        let mut p = ParamStore::new();
        let head_in = match arch.skip {
            SkipKind::Direct => arch.frame_channels() * arch.streams(),
            _ => arch.frame_channels(),
        };
        let head = Conv::new(&mut p, "head", arch.width, head_in, 3, &mut rng);
        let mut enc = Vec::new();
        for l in 0..arch.levels {
            let c = arch.level_width(l);
            let down = (l > 0).then(|| Conv::new(&mut p, &format!("enc{l}.down"), c, arch.level_width(l - 1), 3, &mut rng));
            let c1 = Conv::new(&mut p, &format!("enc{l}.c1"), c, c, 3, &mut rng);
            let c2 = Conv::new(&mut p, &format!("enc{l}.c2"), c, c, 3, &mut rng);
            enc.push(EncLevel { down, c1, c2 });
        }
        let mut skips = Vec::new();
        for l in 0..arch.levels {
            let c = arch.level_width(l);
            let name = format!("skip{l}");
            skips.push(match (arch.skip, arch.mode) {
                (SkipKind::Direct, _) => Skip::Direct,
                (SkipKind::Faam, Mode::Blind) => {
                    Skip::Faam(Faam::new(&mut p, &name, c, arch.neighbors(), &arch.align, &mut rng)?)
                }
                // Non-blind FAAM attends over the centre plus the neighbours.
                (SkipKind::Faam, Mode::Nonblind) => Skip::Faam(Faam::new(&mut p, &name, c, arch.window, &arch.align, &mut rng)?),
                (SkipKind::Fdam, _) => Skip::Fdam(Fdam::new(&mut p, &name, c, arch.neighbors(), &arch.align, &mut rng)?),
            });
        }
        let mut dec = Vec::new();
        for l in 0..arch.levels - 1 {
            let c = arch.level_width(l);
            let up = Conv::new(&mut p, &format!("dec{l}.up"), c, arch.level_width(l + 1), 3, &mut rng);
            let c1 = Conv::new(&mut p, &format!("dec{l}.c1"), c, 2 * c, 3, &mut rng);
            let c2 = Conv::new(&mut p, &format!("dec{l}.c2"), c, c, 3, &mut rng);
            dec.push(DecLevel { up, c1, c2 });
        }
        let tail = Conv::new(&mut p, "tail", arch.data_channels, arch.width, 3, &mut rng);
        // Start from a small residual so early predictions stay near the baseline.
        p.get_mut(tail.w).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Ok(Self { arch, params: p, head, enc, skips, dec, tail })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Names and shapes of the encoder/decoder parameters (skips excluded).
    pub fn backbone_shapes(&self) -> Vec<(String, [usize; 4])> {
        self.params.iter().filter(|(n, _)| !n.starts_with("skip")).map(|(n, t)| (n.to_string(), t.shape())).collect()
    }

    /// Parameters of the skip modules.
    pub fn skip_param_ids(&self) -> Vec<ParamId> {
        self.skips
            .iter()
            .flat_map(|s| match s {
                Skip::Faam(m) => m.param_ids(),
                Skip::Fdam(m) => m.param_ids(),
                Skip::Direct => Vec::new(),
            })
            .collect()
    }

    pub fn fdam_betas(&self) -> Vec<ParamId> {
        self.skips
            .iter()
            .filter_map(|s| match s {
                Skip::Fdam(m) => Some(m.beta),
                _ => None,
            })
            .collect()
    }

    pub fn faams(&self) -> Vec<Faam> {
        self.skips
            .iter()
            .filter_map(|s| match s {
                Skip::Faam(m) => Some(*m),
                _ => None,
            })
            .collect()
    }

    fn check_frame<T: Real>(&self, g: &Graph<T>, x: Var, channels: usize) -> Result<()> {
        let [_, c, h, w] = g.value(x).shape();
        if c != channels {
            return Err(Error::Input(format!("frame input has {c} channels, network expects {channels}")));
        }
        let d = self.arch.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Input(format!("{h}x{w} input is not divisible by {d}")));
        }
        Ok(())
    }

    /// Per-level features of one frame batch `[B, Cin, H, W]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let cin = match self.arch.skip {
            SkipKind::Direct => self.arch.frame_channels() * self.arch.streams(),
            _ => self.arch.frame_channels(),
        };
        self.check_frame(g, x, cin)?;
        let mut h = self.head.apply_act(g, x, 1);
        let mut feats = Vec::with_capacity(self.arch.levels);
        for lvl in &self.enc {
            if let Some(d) = lvl.down {
                h = d.apply_act(g, h, 2);
            }
            h = lvl.c1.apply_act(g, h, 1);
            h = lvl.c2.apply_act(g, h, 1);
            feats.push(h);
        }
        Ok(feats)
    }

    /// Encodes each frame independently.
    pub fn encode_frames<T: Real>(&self, g: &mut Graph<T>, frames: &[Var]) -> Result<Vec<Vec<Var>>> {
        frames.iter().map(|&f| self.encode(g, f)).collect()
    }

    fn decode<T: Real>(&self, g: &mut Graph<T>, skips: &[Var]) -> Var {
        let mut d = skips[self.arch.levels - 1];
        for l in (0..self.arch.levels - 1).rev() {
            let lvl = &self.dec[l];
            let u = g.upsample2(d);
            let u = lvl.up.apply_act(g, u, 1);
            let cat = g.concat(&[u, skips[l]]);
            let h = lvl.c1.apply_act(g, cat, 1);
            d = lvl.c2.apply_act(g, h, 1);
        }
        self.tail.apply(g, d, 1)
    }

    fn check_pyramids<T: Real>(&self, g: &Graph<T>, pyramids: &[Vec<Var>], count: usize) -> Result<()> {
        if pyramids.len() != count {
            return Err(Error::Input(format!("expected {count} flow pyramids, got {}", pyramids.len())));
        }
        for p in pyramids {
            if p.len() != self.arch.levels {
                return Err(Error::Input(format!("flow pyramid has {} levels, network has {}", p.len(), self.arch.levels)));
            }
            for (l, &v) in p.iter().enumerate() {
                if g.value(v).shape()[1] != 2 {
                    return Err(Error::Input(format!("flow at level {l} must have 2 channels")));
                }
            }
        }
        Ok(())
    }

    /// Residual prediction from the neighbours only. The centre frame is not
    /// a parameter of this function.
    pub fn forward_blind<T: Real>(&self, g: &mut Graph<T>, neighbors: &[Var], pyramids: &[Vec<Var>]) -> Result<Var> {
        if self.arch.mode != Mode::Blind {
            return Err(Error::Mode("forward_blind needs a blind state".into()));
        }
        let n = self.arch.neighbors();
        if neighbors.len() != n {
            return Err(Error::Input(format!("blind forward needs {n} neighbours, got {}", neighbors.len())));
        }
        if self.arch.skip == SkipKind::Direct {
            let stacked = g.concat(neighbors);
            let feats = self.encode(g, stacked)?;
            return Ok(self.decode(g, &feats));
        }
        self.check_pyramids(g, pyramids, n)?;
        let feats = self.encode_frames(g, neighbors)?;
        let mut fused = Vec::with_capacity(self.arch.levels);
        for (l, skip) in self.skips.iter().enumerate() {
            let fl: Vec<Var> = feats.iter().map(|f| f[l]).collect();
            let vl: Vec<Var> = pyramids.iter().map(|p| p[l]).collect();
            fused.push(match skip {
                Skip::Faam(m) => m.forward(g, &fl, &vl)?,
                Skip::Fdam(m) => {
                    // No centre exists here: the mean of the warped neighbours
                    // serves as the reference.
                    let warped: Vec<Var> = fl.iter().zip(&vl).map(|(&f, &v)| g.warp(f, v)).collect();
                    let mut acc = warped[0];
                    for &w in &warped[1..] {
                        acc = g.add(acc, w);
                    }
                    let reference = g.scale(acc, 1.0 / warped.len() as f64);
                    m.forward(g, reference, &fl, &vl)?
                }
                Skip::Direct => unreachable!("handled above"),
            });
        }
        Ok(self.decode(g, &fused))
    }

    /// Residual prediction from the centre and its neighbours.
    pub fn forward_nonblind<T: Real>(
        &self,
        g: &mut Graph<T>,
        center: Var,
        neighbors: &[Var],
        pyramids: &[Vec<Var>],
    ) -> Result<Var> {
        if self.arch.mode != Mode::Nonblind {
            return Err(Error::Mode("forward_nonblind needs a non-blind state".into()));
        }
        let n = self.arch.neighbors();
        if neighbors.len() != n {
            return Err(Error::Input(format!("non-blind forward needs {n} neighbours, got {}", neighbors.len())));
        }
        if self.arch.skip == SkipKind::Direct {
            let half = n / 2;
            let mut all = neighbors[..half].to_vec();
            all.push(center);
            all.extend_from_slice(&neighbors[half..]);
            let stacked = g.concat(&all);
            let feats = self.encode(g, stacked)?;
            return Ok(self.decode(g, &feats));
        }
        self.check_pyramids(g, pyramids, n)?;
        let cfeat = self.encode(g, center)?;
        let feats = self.encode_frames(g, neighbors)?;
        let mut fused = Vec::with_capacity(self.arch.levels);
        for (l, skip) in self.skips.iter().enumerate() {
            let fl: Vec<Var> = feats.iter().map(|f| f[l]).collect();
            let vl: Vec<Var> = pyramids.iter().map(|p| p[l]).collect();
            fused.push(match skip {
                Skip::Fdam(m) => m.forward(g, cfeat[l], &fl, &vl)?,
                Skip::Faam(m) => {
                    let shape = g.value(vl[0]).shape();
                    let zero = g.input(crate::autograd::Tensor::zeros(shape));
                    let mut all = vec![cfeat[l]];
                    all.extend_from_slice(&fl);
                    let mut flows = vec![zero];
                    flows.extend_from_slice(&vl);
                    m.forward(g, &all, &flows)?
                }
                Skip::Direct => unreachable!("handled above"),
            });
        }
        Ok(self.decode(g, &fused))
    }

    /// Upper bound, in level-0 pixels, on how far an input perturbation can
    /// move the output, given the largest level-0 flow magnitude. Global
    /// pooling in channel attention is not spatially bounded and is ignored.
    pub fn receptive_radius(&self, max_flow: f64) -> usize {
        let a = &self.arch;
        let s = |l: usize| (1usize << l) as f64;
        let mut r = 1.0; // head
        for l in 0..a.levels {
            if l > 0 {
                r += s(l - 1);
            }
            r += 2.0 * s(l);
        }
        for l in 0..a.levels {
            r += match a.skip {
                SkipKind::Direct => 0.0,
                SkipKind::Faam => max_flow + (a.align.spatial_kernel / 2) as f64 * s(l),
                SkipKind::Fdam => 2.0 * max_flow + (2.0 + (a.align.dcn_kernel / 2) as f64 + a.align.delta_max) * s(l),
            };
        }
        for l in 0..a.levels.saturating_sub(1) {
            r += s(l + 1) + 3.0 * s(l);
        }
        r += 1.0; // tail
        r.ceil() as usize
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            arch: Arch,
            info: &'a serde_json::Value,
        }
        checkpoint::save(path, CHECKPOINT_KIND, &Meta { arch: self.arch, info: meta }, &[("params", &self.params)])
    }

    /// Rebuilds the handles from the stored architecture and adopts `params`
    /// after checking names and shapes.
    pub fn from_parts(arch: Arch, params: ParamStore<f32>, path: &Path) -> Result<Self> {
        let mut state = Self::init(arch, 0)?;
        let layout_ok = params.len() == state.params.len()
            && params.iter().zip(state.params.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !layout_ok {
            return Err(Error::format(path, "parameter layout does not match the stored architecture"));
        }
        state.params = params;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<(Self, checkpoint::Checkpoint)> {
        let ck = checkpoint::load(path)?;
        let state = Self::from_checkpoint(&ck, path)?;
        Ok((state, ck))
    }

    pub fn from_checkpoint(ck: &checkpoint::Checkpoint, path: &Path) -> Result<Self> {
        let arch: Arch = serde_json::from_value(ck.meta.get("arch").cloned().unwrap_or_default())
            .map_err(|e| Error::format(path, format!("architecture header: {e}")))?;
        Self::from_parts(arch, ck.group("params", path)?.clone(), path)
    }
}

#[cfg(test)]
mod tests;
