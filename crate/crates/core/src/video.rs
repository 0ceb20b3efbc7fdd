//! Frames and video sequences.

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::noise::NoiseModel;

/// One image, channel-major (`[C, H, W]`), in normalised intensity units.
#[derive(Clone, PartialEq)]
pub struct Frame {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame[{}x{}x{}]", self.channels, self.height, self.width)
    }
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Input(format!("frame data has {} values, expected {channels}x{height}x{width}", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.dims() == other.dims()
    }

    fn check_dims(&self, other: &Frame, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Input(format!("{what}: frame dims {:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    pub fn zip_map(&self, other: &Frame, f: impl Fn(f32, f32) -> f32) -> Result<Frame> {
        self.check_dims(other, "elementwise op")?;
        Ok(Frame {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Frame) -> Result<Frame> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Frame) -> Result<Frame> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Frame {
        Frame { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn clipped(&self) -> Frame {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Channel mean as a single-channel frame.
    pub fn luminance(&self) -> Frame {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; hw];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        Frame { channels: 1, height: self.height, width: self.width, data: out }
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Frame> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Input(format!("crop {h}x{w} at ({y0},{x0}) exceeds {}x{}", self.height, self.width)));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&p[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Ok(Frame { channels: self.channels, height: h, width: w, data })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    /// Frame from sample `n` of a `[N, C, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Frame {
        let [_, c, h, w] = t.shape();
        Frame { channels: c, height: h, width: w, data: t.sample(n).iter().map(|v| v.to_f64_lossy() as f32).collect() }
    }

    pub fn batch_tensor<T: Real>(frames: &[&Frame]) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = frames.iter().map(|f| f.to_tensor()).collect();
        Tensor::stack(&parts)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Srgb,
    RgbgPacked,
}

/// Ordered frames of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub layout: Layout,
    pub noise_meta: Option<NoiseModel>,
    frames: Vec<Frame>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, layout: Layout, frames: Vec<Frame>) -> Result<Self> {
        let seq = Self { id: id.into(), layout, noise_meta: None, frames };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::Input(format!("sequence `{}` has no frames", self.id)));
        };
        if let Some(bad) = self.frames.iter().position(|f| !f.same_dims(first)) {
            return Err(Error::Input(format!(
                "sequence `{}`: frame {bad} has dims {:?}, frame 0 has {:?}",
                self.id,
                self.frames[bad].dims(),
                first.dims()
            )));
        }
        if self.layout == Layout::RgbgPacked && first.channels() != 4 {
            return Err(Error::Input(format!(
                "sequence `{}`: packed layout needs 4 channels, got {}",
                self.id,
                first.channels()
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims()
    }

    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self> {
        let seq = Self { frames, ..self.clone() };
        seq.validate()?;
        Ok(seq)
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}
