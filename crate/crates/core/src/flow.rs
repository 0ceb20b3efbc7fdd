//! Dense displacement fields.
//!
//! A field `V` defined on destination coordinates maps every destination
//! pixel `p` to the source location `p + V(p)`; warping a source frame by it
//! (backward warping) aligns the source to the destination.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::video::Frame;

/// Middlebury `.flo` magic number.
const FLO_MAGIC: f32 = 202021.25;

/// Displacement field `[2, H, W]`: plane 0 is `dx`, plane 1 is `dy`, in pixels.
#[derive(Clone, PartialEq)]
pub struct FlowField(Frame);

impl std::fmt::Debug for FlowField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FlowField[{}x{}]", self.height(), self.width())
    }
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Frame::zeros(2, height, width))
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let mut f = Self::zeros(height, width);
        f.0.plane_mut(0).iter_mut().for_each(|v| *v = dx);
        f.0.plane_mut(1).iter_mut().for_each(|v| *v = dy);
        f
    }

    pub fn from_frame(frame: Frame) -> Result<Self> {
        if frame.channels() != 2 {
            return Err(Error::Input(format!("flow field needs 2 channels, got {}", frame.channels())));
        }
        Ok(FlowField(frame))
    }

    pub fn as_frame(&self) -> &Frame {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn dx(&self) -> &[f32] {
        self.0.plane(0)
    }

    pub fn dy(&self) -> &[f32] {
        self.0.plane(1)
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        (self.0.get(0, y, x), self.0.get(1, y, x))
    }

    pub fn set(&mut self, y: usize, x: usize, v: (f32, f32)) {
        self.0.set(0, y, x, v.0);
        self.0.set(1, y, x, v.1);
    }

    pub fn is_zero(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data().iter().all(|v| v.is_finite())
    }

    pub fn negated(&self) -> Self {
        FlowField(self.0.map(|v| -v))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(FlowField(self.0.crop(y0, x0, h, w)?))
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.height() * self.width();
        self.dx().iter().zip(self.dy()).map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt()).sum::<f64>() / n as f64
    }

    pub fn max_magnitude(&self) -> f32 {
        self.dx().iter().zip(self.dy()).map(|(&a, &b)| (a * a + b * b).sqrt()).fold(0.0, f32::max)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        self.0.to_tensor()
    }

    pub fn write_flo(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = Vec::with_capacity(12 + 8 * h * w);
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(w as i32).to_le_bytes());
        buf.extend_from_slice(&(h as i32).to_le_bytes());
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = self.at(y, x);
                buf.extend_from_slice(&dx.to_le_bytes());
                buf.extend_from_slice(&dy.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_flo(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
        if buf.len() < 12 {
            return Err(Error::format(path, "truncated header"));
        }
        let word = |i: usize| [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]];
        if f32::from_le_bytes(word(0)) != FLO_MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let w = i32::from_le_bytes(word(4));
        let h = i32::from_le_bytes(word(8));
        if w <= 0 || h <= 0 {
            return Err(Error::format(path, format!("bad dimensions {w}x{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        if buf.len() != 12 + 8 * w * h {
            return Err(Error::format(path, "payload size does not match header"));
        }
        let mut flow = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let o = 12 + 8 * (y * w + x);
                flow.set(y, x, (f32::from_le_bytes(word(o)), f32::from_le_bytes(word(o + 4))));
            }
        }
        Ok(flow)
    }
}
