//! Structural audits: centre-frame blindness of stage-1 states and
//! integrity of frozen components.

use rand::Rng;

use crate::backbone::{Mode, ModelState};
use crate::error::{Error, Result};
use crate::priors::Priors;
use crate::rng::rng_for;
use crate::synth::window::TemporalWindow;
use crate::training::{blind_inputs, predict_frames, preprocess, StageInputs};
use crate::video::Frame;

/// Largest absolute change of the blind output when only the centre frame
/// changes. Each trial replaces the centre with fresh uniform content and is
/// compared against the unperturbed window. Flows are held at the values
/// estimated from the original window, so the comparison isolates the
/// network's own dependence on the centre.
pub fn blindness_audit(state: &ModelState, window: &TemporalWindow, priors: &Priors, trials: usize, seed: u64) -> Result<f64> {
    if state.arch.mode != Mode::Blind {
        return Err(Error::Mode("the blindness audit applies to blind states only".into()));
    }
    let pre = preprocess(window, priors)?;
    let reference = blind_inputs(&pre, state.arch.input)?;
    let base = predict_frames(state, std::slice::from_ref(&reference))?.remove(0);
    let c = window.center();
    let (ch, h, w) = window.frames[c].dims();
    let mut worst = 0.0f64;
    let trials: Vec<usize> = (0..trials.max(1)).collect();
    for chunk in trials.chunks(8) {
        let mut items: Vec<StageInputs> = Vec::with_capacity(chunk.len());
        for &k in chunk {
            let mut rng = rng_for(&[seed, k as u64]);
            let centre = Frame::new(ch, h, w, (0..ch * h * w).map(|_| rng.gen::<f32>()).collect())?;
            let mut perturbed = window.clone();
            perturbed.frames[c] = centre;
            let mut p = preprocess(&perturbed, priors)?;
            p.flows = pre.flows.clone();
            items.push(blind_inputs(&p, state.arch.input)?);
        }
        for out in predict_frames(state, &items)? {
            for (&a, &b) in out.data().iter().zip(base.data()) {
                worst = worst.max((a as f64 - b as f64).abs());
            }
        }
    }
    Ok(worst)
}
