//! Deployment of the spatial refiner: `x̂ = f(z, V) + D(y_t)` on the original
//! noisy joint inputs, with optional spatial tiling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{InputKind, Mode, ModelState};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::noise::draws_on_this_thread;
use crate::priors::Priors;
use crate::synth::scene::GroundTruthFlow;
use crate::synth::window::extract_window;
use crate::training::{estimate_frames, nonblind_inputs, Preprocessed, StageInputs};
use crate::video::{Frame, VideoSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Temporal window; must equal the trained window when set.
    pub window: Option<usize>,
    /// Tile core size in pixels; 0 disables tiling.
    pub tile: usize,
    /// Halo around each tile core; defaults to the receptive radius.
    pub overlap: Option<usize>,
    /// Windows evaluated per network call.
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { window: None, tile: 0, overlap: None, batch: 4 }
    }
}

/// Loads a refiner checkpoint. Blind (stage-1) states are refused.
pub fn load_refiner(path: &Path) -> Result<(ModelState, String)> {
    let (state, ck) = ModelState::load(path)?;
    if state.arch.mode != Mode::Nonblind {
        return Err(Error::Mode(format!(
            "{} holds a blind estimator; only the non-blind refiner is deployed at inference",
            path.display()
        )));
    }
    Ok((state, ck.digest))
}

fn check_state(state: &ModelState, cfg: &InferenceConfig) -> Result<()> {
    if state.arch.mode != Mode::Nonblind || state.arch.input != InputKind::Joint {
        return Err(Error::Mode("inference needs a non-blind joint-input state".into()));
    }
    if let Some(t) = cfg.window {
        if t != state.arch.window {
            return Err(Error::Config(format!("inference.window={t} differs from the trained window T={}", state.arch.window)));
        }
    }
    if cfg.batch == 0 {
        return Err(Error::Config("inference.batch must be positive".into()));
    }
    Ok(())
}

/// Original-input network inputs for every centre position, reusing one
/// `D(y_k)` per frame.
fn all_inputs(
    state: &ModelState,
    seq: &VideoSequence,
    gt: Option<&GroundTruthFlow>,
    positions: &[usize],
    priors: &Priors,
) -> Result<Vec<StageInputs>> {
    let baselines = seq.frames().iter().map(|y| priors.denoiser.denoise(y)).collect::<Result<Vec<_>>>()?;
    positions
        .iter()
        .map(|&t| {
            let w = extract_window(seq, gt, t, state.arch.window)?;
            let c = w.center();
            let b: Vec<Frame> = w.source_positions.iter().map(|&s| baselines[s].clone()).collect();
            let flows = w
                .neighbor_slots()
                .into_iter()
                .map(|i| priors.flow.estimate(&b[i], &b[c], w.gt_flows.as_ref().map(|f| &f[i])))
                .collect::<Result<Vec<_>>>()?;
            let pre = Preprocessed { key: w.key(), center: c, noisy: w.frames.clone(), baselines: b, flows };
            nonblind_inputs(&pre, InputKind::Joint)
        })
        .collect()
}

fn crop_inputs(s: &StageInputs, y0: usize, x0: usize, h: usize, w: usize) -> Result<StageInputs> {
    let crop = |f: &Frame| f.crop(y0, x0, h, w);
    Ok(StageInputs {
        key: s.key.clone(),
        center: s.center.as_ref().map(crop).transpose()?,
        neighbors: s.neighbors.iter().map(crop).collect::<Result<_>>()?,
        flows: s.flows.iter().map(|f| f.crop(y0, x0, h, w)).collect::<Result<_>>()?,
        target: None,
        base: s.base.as_ref().map(crop).transpose()?,
    })
}

/// Tile spans along one axis: `(start, len)` of each expanded tile, aligned
/// to `align`.
fn spans(len: usize, core: usize, halo: usize, align: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut c0 = 0;
    while c0 < len {
        let c1 = (c0 + core).min(len);
        let s = c0.saturating_sub(halo) / align * align;
        let e = ((c1 + halo).div_ceil(align) * align).min(len);
        out.push((s, e - s));
        c0 = c1;
    }
    out
}

/// Blend weight along one axis at offset `d` into a span whose ends are
/// interior (not frame borders) as flagged.
fn axis_weight(d: usize, len: usize, lo_interior: bool, hi_interior: bool, radius: usize, halo: usize) -> f64 {
    let ramp = |dist: usize| -> f64 {
        if dist < radius {
            0.0
        } else {
            ((dist - radius + 1) as f64 / (halo - radius + 1) as f64).min(1.0)
        }
    };
    let mut w: f64 = 1.0;
    if lo_interior {
        w = w.min(ramp(d));
    }
    if hi_interior {
        w = w.min(ramp(len - 1 - d));
    }
    w
}

fn max_flow(s: &StageInputs) -> f64 {
    s.flows.iter().map(|f: &FlowField| f.max_magnitude() as f64).fold(0.0, f64::max)
}

fn denoise_tiled(state: &ModelState, s: &StageInputs, cfg: &InferenceConfig) -> Result<Frame> {
    let (_, h, w) = s.neighbors[0].dims();
    let ch = state.arch.data_channels;
    let radius = state.receptive_radius(max_flow(s));
    let halo = cfg.overlap.unwrap_or(radius);
    if halo < radius {
        return Err(Error::Config(format!("inference.overlap={halo} is below the receptive radius {radius} of this model")));
    }
    let align = state.arch.divisor();
    if !cfg.tile.is_multiple_of(align) {
        return Err(Error::Config(format!("inference.tile must be a multiple of {align}")));
    }
    let mut acc = vec![0.0f64; ch * h * w];
    let mut wsum = vec![0.0f64; h * w];
    for &(y0, th) in &spans(h, cfg.tile, halo, align) {
        for &(x0, tw) in &spans(w, cfg.tile, halo, align) {
            let part = crop_inputs(s, y0, x0, th, tw)?;
            let est = estimate_frames(state, std::slice::from_ref(&part))?.remove(0);
            for y in 0..th {
                let wy = axis_weight(y, th, y0 > 0, y0 + th < h, radius, halo);
                for x in 0..tw {
                    let wt = wy * axis_weight(x, tw, x0 > 0, x0 + tw < w, radius, halo);
                    if wt == 0.0 {
                        continue;
                    }
                    let p = (y0 + y) * w + x0 + x;
                    wsum[p] += wt;
                    for c in 0..ch {
                        acc[c * h * w + p] += wt * est.get(c, y, x) as f64;
                    }
                }
            }
        }
    }
    let data = (0..ch * h * w).map(|i| (acc[i] / wsum[i % (h * w)]) as f32).collect();
    Frame::new(ch, h, w, data)
}

fn run(state: &ModelState, inputs: &[StageInputs], cfg: &InferenceConfig) -> Result<Vec<Frame>> {
    let (_, h, w) = inputs[0].neighbors[0].dims();
    if cfg.tile > 0 && (cfg.tile < h || cfg.tile < w) {
        return inputs.iter().map(|s| denoise_tiled(state, s, cfg)).collect();
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(cfg.batch) {
        out.extend(estimate_frames(state, chunk)?);
    }
    Ok(out)
}

fn guarded<R>(f: impl FnOnce() -> Result<R>) -> Result<R> {
    let before = draws_on_this_thread();
    let r = f()?;
    if draws_on_this_thread() != before {
        return Err(Error::Invariant("inference drew random noise".into()));
    }
    Ok(r)
}

/// Refined estimate of frame `t`.
pub fn denoise_frame_at(
    state: &ModelState,
    seq: &VideoSequence,
    gt: Option<&GroundTruthFlow>,
    t: usize,
    priors: &Priors,
    cfg: &InferenceConfig,
) -> Result<Frame> {
    check_state(state, cfg)?;
    guarded(|| {
        let inputs = all_inputs(state, seq, gt, &[t], priors)?;
        Ok(run(state, &inputs, cfg)?.remove(0))
    })
}

/// Refined estimate of every frame, in order.
pub fn denoise_video(
    state: &ModelState,
    seq: &VideoSequence,
    gt: Option<&GroundTruthFlow>,
    priors: &Priors,
    cfg: &InferenceConfig,
) -> Result<VideoSequence> {
    check_state(state, cfg)?;
    guarded(|| {
        let positions: Vec<usize> = (0..seq.len()).collect();
        let inputs = all_inputs(state, seq, gt, &positions, priors)?;
        let mut out = seq.with_frames(run(state, &inputs, cfg)?)?;
        out.noise_meta = None;
        Ok(out)
    })
}
