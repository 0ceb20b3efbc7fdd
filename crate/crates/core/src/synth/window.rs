//! Temporal windows and random crops.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::rng::{label_key, rng_for};
use crate::synth::scene::GroundTruthFlow;
use crate::video::{Frame, VideoSequence};

/// `T` consecutive frames centred on one target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalWindow {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    /// Index of the source frame each window slot was read from.
    pub source_positions: Vec<usize>,
    /// Whether the slot was filled by temporal reflection.
    pub reflected: Vec<bool>,
    /// Ground-truth flow from each slot's source frame to the centre frame.
    pub gt_flows: Option<Vec<FlowField>>,
    /// Crop origin `(y, x)` relative to the full frame.
    pub origin: (usize, usize),
}

impl TemporalWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn center(&self) -> usize {
        (self.frames.len() - 1) / 2
    }

    pub fn center_frame(&self) -> &Frame {
        &self.frames[self.center()]
    }

    pub fn center_source(&self) -> usize {
        self.source_positions[self.center()]
    }

    /// Slots other than the centre, in window order.
    pub fn neighbor_slots(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| i != self.center()).collect()
    }

    pub fn neighbors(&self) -> Vec<&Frame> {
        self.neighbor_slots().into_iter().map(|i| &self.frames[i]).collect()
    }

    /// Stable identifier of the window's centre, used for provenance checks.
    pub fn key(&self) -> String {
        format!("{}@{}+{},{}", self.clip_id, self.center_source(), self.origin.0, self.origin.1)
    }
}

/// Maps a possibly out-of-range index into `[0, len)` by mirror reflection
/// about the first and last frame (`-1 -> 1`, `len -> len - 2`).
pub fn reflect_index(p: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = p.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn check_window_size(t_window: usize) -> Result<()> {
    if t_window.is_multiple_of(2) || t_window < 3 {
        return Err(Error::Config(format!("temporal window must be odd and at least 3, got {t_window}")));
    }
    Ok(())
}

/// Window of `t_window` frames centred at frame `t`, reflecting at clip ends.
pub fn extract_window(seq: &VideoSequence, gt: Option<&GroundTruthFlow>, t: usize, t_window: usize) -> Result<TemporalWindow> {
    check_window_size(t_window)?;
    if t >= seq.len() {
        return Err(Error::Input(format!("centre {t} outside clip of {} frames", seq.len())));
    }
    let half = (t_window / 2) as isize;
    let mut source_positions = Vec::with_capacity(t_window);
    let mut reflected = Vec::with_capacity(t_window);
    for off in -half..=half {
        let p = t as isize + off;
        let s = reflect_index(p, seq.len());
        source_positions.push(s);
        reflected.push(p < 0 || p >= seq.len() as isize);
    }
    let frames = source_positions.iter().map(|&s| seq.frame(s).clone()).collect();
    let gt_flows = gt.map(|g| source_positions.iter().map(|&s| g.get(s, t)).collect::<Result<Vec<_>>>()).transpose()?;
    Ok(TemporalWindow { clip_id: seq.id.clone(), frames, source_positions, reflected, gt_flows, origin: (0, 0) })
}

/// The same random `size x size` crop applied to every frame and flow.
pub fn crop_patch(window: &TemporalWindow, size: usize, seed: u64) -> Result<TemporalWindow> {
    let (_, h, w) = window.frames[0].dims();
    if size == 0 || size > h || size > w {
        return Err(Error::Config(format!("patch size {size} does not fit {h}x{w} frames")));
    }
    let mut rng = rng_for(&[seed, label_key("crop")]);
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    crop_at(window, y0, x0, size, size)
}

pub fn crop_at(window: &TemporalWindow, y0: usize, x0: usize, h: usize, w: usize) -> Result<TemporalWindow> {
    let frames = window.frames.iter().map(|f| f.crop(y0, x0, h, w)).collect::<Result<Vec<_>>>()?;
    let gt_flows =
        window.gt_flows.as_ref().map(|fl| fl.iter().map(|f| f.crop(y0, x0, h, w)).collect::<Result<Vec<_>>>()).transpose()?;
    Ok(TemporalWindow { frames, gt_flows, origin: (window.origin.0 + y0, window.origin.1 + x0), ..window.clone() })
}
