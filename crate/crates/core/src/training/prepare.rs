//! Turning noisy windows into network inputs, targets and anchors.

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::backbone::{InputKind, Mode, ModelState};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::noise::{sample_recorruption, NoiseModel};
use crate::priors::{build_flow_pyramid, Priors};
use crate::synth::window::TemporalWindow;
use crate::video::Frame;

/// A window after the frozen priors: baselines `x̂_i = D(y_i)` for every slot
/// and flows `E(x̂_i, x̂_t)` for every neighbour slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub key: String,
    pub center: usize,
    pub noisy: Vec<Frame>,
    pub baselines: Vec<Frame>,
    /// Indexed like [`TemporalWindow::neighbor_slots`].
    pub flows: Vec<FlowField>,
}

impl Preprocessed {
    pub fn neighbor_slots(&self) -> Vec<usize> {
        (0..self.noisy.len()).filter(|&i| i != self.center).collect()
    }
}

fn slot_flow(window: &TemporalWindow, slot: usize) -> Option<&FlowField> {
    window.gt_flows.as_ref().map(|f| &f[slot])
}

pub fn preprocess(window: &TemporalWindow, priors: &Priors) -> Result<Preprocessed> {
    let baselines = window.frames.iter().map(|y| priors.denoiser.denoise(y)).collect::<Result<Vec<_>>>()?;
    let c = window.center();
    let flows = window
        .neighbor_slots()
        .into_iter()
        .map(|i| priors.flow.estimate(&baselines[i], &baselines[c], slot_flow(window, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Preprocessed { key: window.key(), center: c, noisy: window.frames.clone(), baselines, flows })
}

/// Network-ready frames of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInputs {
    pub key: String,
    /// Present only for non-blind inputs.
    pub center: Option<Frame>,
    pub neighbors: Vec<Frame>,
    pub flows: Vec<FlowField>,
    pub target: Option<Frame>,
    /// Added to the network output to form the frame estimate.
    pub base: Option<Frame>,
}

fn frame_input(pre: &Preprocessed, slot: usize, kind: InputKind) -> Result<Frame> {
    match kind {
        InputKind::Joint => Ok(crate::priors::JointInput {
            baseline: pre.baselines[slot].clone(),
            residual: pre.noisy[slot].sub(&pre.baselines[slot])?,
        }
        .concat()),
        InputKind::Raw => Ok(pre.noisy[slot].clone()),
    }
}

/// Stage-1 inputs. Only neighbour slots are read to build network inputs;
/// the centre contributes only the target and the baseline.
pub fn blind_inputs(pre: &Preprocessed, kind: InputKind) -> Result<StageInputs> {
    let neighbors = pre.neighbor_slots().into_iter().map(|i| frame_input(pre, i, kind)).collect::<Result<Vec<_>>>()?;
    let (y, xh) = (&pre.noisy[pre.center], &pre.baselines[pre.center]);
    let (target, base) = match kind {
        InputKind::Joint => (y.sub(xh)?, Some(xh.clone())),
        InputKind::Raw => (y.clone(), None),
    };
    Ok(StageInputs { key: pre.key.clone(), center: None, neighbors, flows: pre.flows.clone(), target: Some(target), base })
}

/// Inference inputs: the original joint inputs, centre included.
pub fn nonblind_inputs(pre: &Preprocessed, kind: InputKind) -> Result<StageInputs> {
    let mut s = blind_inputs(pre, kind)?;
    s.center = Some(frame_input(pre, pre.center, kind)?);
    s.target = None;
    Ok(s)
}

/// The temporal anchor `x̂_s1 = x̂_t + r̂` with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFrame {
    pub frame: Frame,
    pub checkpoint_id: String,
    pub window_key: String,
}

impl AnchorFrame {
    pub fn new(baseline: &Frame, residual: &Frame, checkpoint_id: &str, window_key: &str) -> Result<Self> {
        let frame = baseline.add(residual)?;
        let exact = frame.data().iter().zip(baseline.data().iter().zip(residual.data())).all(|(&a, (&b, &r))| a == b + r);
        if !exact {
            return Err(Error::Invariant("anchor differs from baseline plus residual".into()));
        }
        Ok(Self { frame, checkpoint_id: checkpoint_id.into(), window_key: window_key.into() })
    }
}

/// Replaces the centre with `x̂_s1 + n'`; neighbours are left untouched.
/// The returned noise is the perturbation actually applied, `y'_t - x̂_s1`.
pub fn recorrupt_window(
    window: &TemporalWindow,
    anchor: &AnchorFrame,
    model: &NoiseModel,
    seed: u64,
) -> Result<(TemporalWindow, Frame)> {
    if anchor.window_key != window.key() {
        return Err(Error::Provenance(format!(
            "anchor belongs to window {} but recorruption was requested for {}",
            anchor.window_key,
            window.key()
        )));
    }
    let c = window.center();
    if anchor.frame.dims() != window.frames[c].dims() {
        return Err(Error::Input("anchor shape differs from the window's frames".into()));
    }
    let n = sample_recorruption(anchor.frame.dims(), model, Some(&anchor.frame), seed)?;
    let mut out = window.clone();
    out.frames[c] = anchor.frame.add(&n)?;
    let applied = out.frames[c].sub(&anchor.frame)?;
    for i in window.neighbor_slots() {
        if out.frames[i] != window.frames[i] {
            return Err(Error::Invariant(format!("recorruption modified neighbour slot {i}")));
        }
    }
    Ok((out, applied))
}

/// Stage-2 inputs from a recorrupted window. Neighbour baselines and joint
/// inputs are reused from stage 1; flows are re-estimated against `D(y'_t)`.
pub fn recorrupted_inputs(
    window: &TemporalWindow,
    pre: &Preprocessed,
    anchor: &AnchorFrame,
    model: &NoiseModel,
    priors: &Priors,
    seed: u64,
) -> Result<(StageInputs, Frame)> {
    let (w2, n) = recorrupt_window(window, anchor, model, seed)?;
    let c = pre.center;
    let y2 = &w2.frames[c];
    let d2 = priors.denoiser.denoise(y2)?;
    let mut baselines = pre.baselines.clone();
    baselines[c] = d2.clone();
    let flows = pre
        .neighbor_slots()
        .into_iter()
        .map(|i| priors.flow.estimate(&baselines[i], &d2, slot_flow(window, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut noisy = pre.noisy.clone();
    noisy[c] = y2.clone();
    let pre2 = Preprocessed { key: pre.key.clone(), center: c, noisy, baselines, flows };
    let mut s = nonblind_inputs(&pre2, InputKind::Joint)?;
    s.target = Some(anchor.frame.sub(&d2)?);
    s.base = Some(d2);
    Ok((s, n))
}

/// Stacked tensors for a batch of windows.
#[derive(Debug, Clone)]
pub struct BatchTensors<T> {
    pub center: Option<Tensor<T>>,
    pub neighbors: Vec<Tensor<T>>,
    /// Per neighbour slot, per level.
    pub pyramids: Vec<Vec<Tensor<T>>>,
    pub target: Option<Tensor<T>>,
    pub base: Option<Tensor<T>>,
}

impl<T: Real> BatchTensors<T> {
    pub fn new(items: &[StageInputs], levels: usize) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let stack = |get: &dyn Fn(&StageInputs) -> Option<&Frame>| -> Option<Tensor<T>> {
            let frames: Option<Vec<&Frame>> = items.iter().map(get).collect();
            frames.map(|f| Frame::batch_tensor(&f))
        };
        let n = first.neighbors.len();
        let neighbors = (0..n).map(|k| stack(&|s| s.neighbors.get(k)).expect("equal arity")).collect();
        let mut pyramids = Vec::with_capacity(n);
        for k in 0..n {
            let per_item = items.iter().map(|s| build_flow_pyramid(&s.flows[k], levels)).collect::<Result<Vec<_>>>()?;
            pyramids.push(
                (0..levels)
                    .map(|l| {
                        let frames: Vec<&Frame> = per_item.iter().map(|p| p[l].as_frame()).collect();
                        Frame::batch_tensor(&frames)
                    })
                    .collect(),
            );
        }
        Ok(Self {
            center: stack(&|s| s.center.as_ref()),
            neighbors,
            pyramids,
            target: stack(&|s| s.target.as_ref()),
            base: stack(&|s| s.base.as_ref()),
        })
    }
}

/// Runs the network of `state` on a batch; returns the raw network output.
pub fn predict<T: Real>(state: &ModelState, g: &mut Graph<T>, b: &BatchTensors<T>) -> Result<Var> {
    let neighbors: Vec<Var> = b.neighbors.iter().map(|t| g.input(t.clone())).collect();
    let pyramids: Vec<Vec<Var>> = b.pyramids.iter().map(|p| p.iter().map(|t| g.input(t.clone())).collect()).collect();
    match state.arch.mode {
        Mode::Blind => state.forward_blind(g, &neighbors, &pyramids),
        Mode::Nonblind => {
            let c = b.center.clone().ok_or_else(|| Error::Input("non-blind prediction needs a centre input".into()))?;
            let c = g.input(c);
            state.forward_nonblind(g, c, &neighbors, &pyramids)
        }
    }
}

/// Network outputs for a batch, evaluated without gradient tracking.
pub fn predict_frames(state: &ModelState, items: &[StageInputs]) -> Result<Vec<Frame>> {
    let b = BatchTensors::<f32>::new(items, state.arch.levels)?;
    let mut g = Graph::with_params(&state.params, false);
    let out = predict(state, &mut g, &b)?;
    let t = g.take_value(out);
    Ok((0..items.len()).map(|n| Frame::from_tensor(&t, n)).collect())
}

/// Frame estimates: the network output plus the base, if any.
pub fn estimate_frames(state: &ModelState, items: &[StageInputs]) -> Result<Vec<Frame>> {
    let out = predict_frames(state, items)?;
    out.into_iter()
        .zip(items)
        .map(|(f, s)| match &s.base {
            Some(b) => f.add(b),
            None => Ok(f),
        })
        .collect()
}

/// Anchors for a batch of stage-1 inputs.
pub fn compute_anchors(stage1: &ModelState, checkpoint_id: &str, items: &[StageInputs]) -> Result<Vec<AnchorFrame>> {
    if stage1.arch.mode != Mode::Blind {
        return Err(Error::Mode("anchors come from a blind stage-1 state".into()));
    }
    let out = predict_frames(stage1, items)?;
    out.iter()
        .zip(items)
        .map(|(r, s)| {
            let base = s.base.as_ref().ok_or_else(|| Error::Config("anchors need joint-input stage-1 states".into()))?;
            AnchorFrame::new(base, r, checkpoint_id, &s.key)
        })
        .collect()
}
