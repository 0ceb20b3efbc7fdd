//! Noise distributions for corrupting clean data and for recorruption.
//!
//! Noise is added in the continuous intensity domain and is never clipped
//! here; clipping happens only when frames are exported.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label_key, rng_for};
use crate::video::{Frame, VideoSequence};

/// Generative noise specification. Variances are in squared normalised
/// intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Additive white Gaussian noise with standard deviation `sigma`.
    Awgn { sigma: f64 },
    /// Gaussian approximation of Poisson-Gaussian noise: variance
    /// `shot_gain * x + read_var` at clean intensity `x`.
    SignalDependent { shot_gain: f64, read_var: f64, iso: u32 },
}

impl NoiseModel {
    pub fn awgn(sigma: f64) -> Self {
        NoiseModel::Awgn { sigma }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Err(Error::Parameter(format!("noise {name} must be finite and >= 0, got {v}")));
        match *self {
            NoiseModel::Awgn { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => bad("sigma", sigma),
            NoiseModel::SignalDependent { shot_gain, .. } if !(shot_gain >= 0.0 && shot_gain.is_finite()) => {
                bad("shot_gain", shot_gain)
            }
            NoiseModel::SignalDependent { read_var, .. } if !(read_var >= 0.0 && read_var.is_finite()) => {
                bad("read_var", read_var)
            }
            _ => Ok(()),
        }
    }

    /// Variance at intensity `x`. Negative intensities count as zero signal.
    pub fn variance_at(&self, x: f64) -> f64 {
        match *self {
            NoiseModel::Awgn { sigma } => sigma * sigma,
            NoiseModel::SignalDependent { shot_gain, read_var, .. } => shot_gain * x.max(0.0) + read_var,
        }
    }

    pub fn is_signal_dependent(&self) -> bool {
        matches!(self, NoiseModel::SignalDependent { .. })
    }

    /// Nominal standard deviation at mid-grey, used to tune classical priors.
    pub fn nominal_sigma(&self) -> f64 {
        self.variance_at(0.5).sqrt()
    }
}

thread_local! {
    static DRAWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of Gaussian samples drawn on the current thread so far.
pub fn draws_on_this_thread() -> u64 {
    DRAWS.with(Cell::get)
}

fn draw_field(dims: (usize, usize, usize), seed_parts: &[u64], std_at: impl Fn(usize) -> f64) -> Frame {
    let (c, h, w) = dims;
    let n = c * h * w;
    let mut rng = rng_for(seed_parts);
    let data = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            (std_at(i) * z) as f32
        })
        .collect();
    DRAWS.with(|d| d.set(d.get() + n as u64));
    Frame::new(c, h, w, data).expect("dims match by construction")
}

/// `y = x + n` with `n` drawn independently per pixel and frame.
pub fn corrupt(clean: &VideoSequence, model: &NoiseModel, seed: u64) -> Result<VideoSequence> {
    model.validate()?;
    if clean.is_empty() {
        return Err(Error::Input("cannot corrupt an empty sequence".into()));
    }
    let mut frames = Vec::with_capacity(clean.len());
    for (k, x) in clean.frames().iter().enumerate() {
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("clean frame {k} of `{}` has value {v} outside [0, 1]", clean.id)));
        }
        let parts = [seed, label_key("corrupt"), k as u64];
        let n = draw_field(x.dims(), &parts, |i| model.variance_at(x.data()[i] as f64).sqrt());
        frames.push(x.add(&n)?);
    }
    let mut out = clean.with_frames(frames)?;
    out.noise_meta = Some(*model);
    Ok(out)
}

/// Zero-mean recorruption noise `n'`. Signal-dependent models take their
/// per-pixel variance from `reference`.
pub fn sample_recorruption(
    dims: (usize, usize, usize),
    model: &NoiseModel,
    reference: Option<&Frame>,
    seed: u64,
) -> Result<Frame> {
    model.validate()?;
    let parts = [seed, label_key("recorrupt")];
    match (model, reference) {
        (NoiseModel::Awgn { sigma }, r) => {
            if let Some(r) = r {
                if r.dims() != dims {
                    return Err(Error::Input(format!(
                        "recorruption reference dims {:?} differ from requested {dims:?}",
                        r.dims()
                    )));
                }
            }
            Ok(draw_field(dims, &parts, |_| *sigma))
        }
        (NoiseModel::SignalDependent { .. }, None) => {
            Err(Error::Input("signal-dependent recorruption needs a reference intensity frame".into()))
        }
        (NoiseModel::SignalDependent { .. }, Some(r)) => {
            if r.dims() != dims {
                return Err(Error::Input(format!("recorruption reference dims {:?} differ from requested {dims:?}", r.dims())));
            }
            Ok(draw_field(dims, &parts, |i| model.variance_at(r.data()[i] as f64).sqrt()))
        }
    }
}
