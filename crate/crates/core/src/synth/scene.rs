//! Procedural clips of textured discs translating over a textured, panning
//! background. Every object moves rigidly, so the displacement between any
//! two frames is known in closed form.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::rng::rng_for;
use crate::synth::bayer::{mosaic, pack_rgbg, CfaPhase};
use crate::video::{Frame, Layout, VideoSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub sprites: usize,
    /// Sprite speed range in pixels per frame.
    pub velocity: [f64; 2],
    /// Maximum background pan speed in pixels per frame.
    pub background_velocity: f64,
    /// Sprite radius range in pixels.
    pub sprite_radius: [f64; 2],
    /// Highest texture frequency in cycles per pixel.
    pub texture_max_freq: f64,
    pub texture_components: usize,
    /// Largest frame distance for which flows are stored.
    pub flow_radius: usize,
    /// Training crop size; motion over a window must stay within half of it.
    pub patch: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            length: 20,
            sprites: 3,
            velocity: [0.5, 2.0],
            background_velocity: 0.75,
            sprite_radius: [8.0, 16.0],
            texture_max_freq: 0.3,
            texture_components: 6,
            flow_radius: 4,
            patch: 48,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.length == 0 {
            return Err(Error::Config("scene resolution and length must be positive".into()));
        }
        if !(self.velocity[0] >= 0.0 && self.velocity[1] >= self.velocity[0]) {
            return Err(Error::Config(format!("bad velocity range {:?}", self.velocity)));
        }
        if !(self.sprite_radius[0] > 0.0 && self.sprite_radius[1] >= self.sprite_radius[0]) {
            return Err(Error::Config(format!("bad sprite radius range {:?}", self.sprite_radius)));
        }
        if self.texture_max_freq <= 0.0 || self.texture_max_freq > 0.5 {
            return Err(Error::Config("texture_max_freq must be in (0, 0.5]".into()));
        }
        let max_speed = self.velocity[1].max(self.background_velocity);
        let reach = max_speed * self.flow_radius as f64;
        if reach > self.patch as f64 / 2.0 {
            return Err(Error::Config(format!(
                "motion of {reach:.2} px across a window exceeds half the patch size ({})",
                self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Texture {
    base: Vec<f64>,
    waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut impl Rng, channels: usize, components: usize, max_freq: f64) -> Self {
        let base: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.3..0.7)).collect();
        let budget = 0.28 / components.max(1) as f64;
        let waves = (0..components)
            .map(|_| {
                let f = rng.gen_range(0.05..=max_freq);
                let ang = rng.gen_range(0.0..2.0 * PI);
                Wave {
                    fx: f * ang.cos(),
                    fy: f * ang.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: (0..channels).map(|_| rng.gen_range(0.3..1.0) * budget).collect(),
                }
            })
            .collect();
        Self { base, waves }
    }

    fn eval(&self, c: usize, u: f64, v: f64) -> f64 {
        self.base[c] + self.waves.iter().map(|w| w.amp[c] * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).sin()).sum::<f64>()
    }

    /// Bound on the bilinear interpolation error on a unit grid:
    /// `(|f_xx| + |f_yy|) / 8`.
    fn interpolation_bound(&self) -> f64 {
        self.waves
            .iter()
            .map(|w| {
                let a = w.amp.iter().cloned().fold(0.0, f64::max);
                a * (2.0 * PI).powi(2) * (w.fx * w.fx + w.fy * w.fy) / 8.0
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
struct Object {
    /// Centre at frame 0 (background: texture origin).
    origin: (f64, f64),
    velocity: (f64, f64),
    /// `None` for the background layer.
    radius: Option<f64>,
    texture: Texture,
}

impl Object {
    fn center(&self, k: f64) -> (f64, f64) {
        (self.origin.0 + self.velocity.0 * k, self.origin.1 + self.velocity.1 * k)
    }

    fn covers(&self, k: f64, x: f64, y: f64) -> bool {
        match self.radius {
            None => true,
            Some(r) => {
                let (cx, cy) = self.center(k);
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
        }
    }
}

/// A generated scene; frames and flows are evaluated analytically.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    channels: usize,
    objects: Vec<Object>,
}

fn random_velocity(rng: &mut impl Rng, lo: f64, hi: f64) -> (f64, f64) {
    let speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let ang = rng.gen_range(0.0..2.0 * PI);
    (speed * ang.cos(), speed * ang.sin())
}

impl Scene {
    pub fn new(spec: &SceneSpec, channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(&[seed, 0x5CE7E]);
        let mid = (spec.length as f64 - 1.0) / 2.0;
        let bg_velocity = random_velocity(&mut rng, 0.0, spec.background_velocity);
        let mut objects = vec![Object {
            origin: (0.0, 0.0),
            velocity: bg_velocity,
            radius: None,
            texture: Texture::random(&mut rng, channels, spec.texture_components, spec.texture_max_freq),
        }];
        for _ in 0..spec.sprites {
            let velocity = random_velocity(&mut rng, spec.velocity[0], spec.velocity[1]);
            let cmid = (rng.gen_range(0.2..0.8) * spec.width as f64, rng.gen_range(0.2..0.8) * spec.height as f64);
            objects.push(Object {
                origin: (cmid.0 - velocity.0 * mid, cmid.1 - velocity.1 * mid),
                velocity,
                radius: Some(rng.gen_range(spec.sprite_radius[0]..=spec.sprite_radius[1])),
                texture: Texture::random(&mut rng, channels, spec.texture_components, spec.texture_max_freq),
            });
        }
        Ok(Self { spec: spec.clone(), channels, objects })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Index of the topmost object at continuous point `(x, y)` of frame `k`.
    pub fn object_at(&self, k: f64, x: f64, y: f64) -> usize {
        (0..self.objects.len()).rev().find(|&i| self.objects[i].covers(k, x, y)).unwrap_or(0)
    }

    /// Overrides one object's motion; `origin` is its centre at frame 0.
    pub fn set_object_motion(&mut self, object: usize, velocity: (f64, f64), origin: Option<(f64, f64)>, radius: Option<f64>) {
        let o = &mut self.objects[object];
        o.velocity = velocity;
        if let Some(c) = origin {
            o.origin = c;
        }
        if radius.is_some() {
            o.radius = radius;
        }
    }

    pub fn velocity_of(&self, object: usize) -> (f64, f64) {
        self.objects[object].velocity
    }

    pub fn intensity(&self, k: f64, c: usize, x: f64, y: f64) -> f64 {
        let o = &self.objects[self.object_at(k, x, y)];
        let (cx, cy) = o.center(k);
        o.texture.eval(c, x - cx, y - cy)
    }

    /// Frame `k` point-sampled on an `h x w` grid, `scale` grid pixels per
    /// scene unit.
    fn render(&self, k: usize, h: usize, w: usize, scale: f64) -> Frame {
        let mut f = Frame::zeros(self.channels, h, w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as f64 / scale, y as f64 / scale);
                for c in 0..self.channels {
                    f.set(c, y, x, self.intensity(k as f64, c, sx, sy) as f32);
                }
            }
        }
        f
    }

    pub fn render_frame(&self, k: usize) -> Frame {
        self.render(k, self.spec.height, self.spec.width, 1.0)
    }

    /// Backward-warping flow from frame `src` to frame `dst` with its
    /// occlusion mask (1 where the source sample is invalid).
    ///
    /// `scale` is the sampling grid resolution relative to the scene (0.5
    /// for packed Bayer data).
    pub fn flow_with_occlusion(&self, src: usize, dst: usize, h: usize, w: usize, scale: f64) -> (FlowField, Frame) {
        let mut flow = FlowField::zeros(h, w);
        let mut occ = Frame::zeros(1, h, w);
        let dk = src as f64 - dst as f64;
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = scene_point(x, y, scale);
                let o = self.object_at(dst as f64, sx, sy);
                let (vx, vy) = self.objects[o].velocity;
                let (dx, dy) = (vx * dk * scale, vy * dk * scale);
                flow.set(y, x, (dx as f32, dy as f32));
                let (qx, qy) = (x as f64 + dx, y as f64 + dy);
                let inside = qx >= 0.0 && qy >= 0.0 && qx <= (w - 1) as f64 && qy <= (h - 1) as f64;
                let consistent = inside && {
                    let (x0, y0) = (qx.floor() as usize, qy.floor() as usize);
                    let corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
                    corners.iter().all(|&(cx, cy)| {
                        let (cx, cy) = (cx.min(w - 1), cy.min(h - 1));
                        let (px, py) = scene_point(cx, cy, scale);
                        self.object_at(src as f64, px, py) == o
                    })
                };
                if !consistent {
                    occ.set(0, y, x, 1.0);
                }
            }
        }
        (flow, occ)
    }

    /// Worst-case bilinear interpolation error of any object texture.
    pub fn interpolation_error_bound(&self) -> f64 {
        self.objects.iter().map(|o| o.texture.interpolation_bound()).fold(0.0, f64::max)
    }
}

fn scene_point(x: usize, y: usize, scale: f64) -> (f64, f64) {
    if scale == 1.0 {
        (x as f64, y as f64)
    } else {
        // Centre of the block this coarse pixel summarises.
        ((x as f64 + 0.5) / scale - 0.5, (y as f64 + 0.5) / scale - 0.5)
    }
}

/// Exact displacement fields for every stored ordered frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFlow {
    height: usize,
    width: usize,
    radius: usize,
    pairs: BTreeMap<(usize, usize), (FlowField, Frame)>,
}

impl GroundTruthFlow {
    pub fn new(height: usize, width: usize, radius: usize) -> Self {
        Self { height, width, radius, pairs: BTreeMap::new() }
    }

    pub fn insert(&mut self, src: usize, dst: usize, flow: FlowField, occlusion: Frame) {
        self.pairs.insert((src, dst), (flow, occlusion));
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Flow from `src` to `dst`; the identity pair is the zero field.
    pub fn get(&self, src: usize, dst: usize) -> Result<FlowField> {
        if src == dst {
            return Ok(FlowField::zeros(self.height, self.width));
        }
        self.pairs
            .get(&(src, dst))
            .map(|p| p.0.clone())
            .ok_or_else(|| Error::Input(format!("no ground-truth flow stored for pair {src}->{dst}")))
    }

    pub fn occlusion(&self, src: usize, dst: usize) -> Result<Frame> {
        if src == dst {
            return Ok(Frame::zeros(1, self.height, self.width));
        }
        self.pairs
            .get(&(src, dst))
            .map(|p| p.1.clone())
            .ok_or_else(|| Error::Input(format!("no occlusion mask stored for pair {src}->{dst}")))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(usize, usize), &(FlowField, Frame))> {
        self.pairs.iter()
    }
}

/// Renders a clean clip and its exact flows.
pub fn generate_synthetic(
    id: &str,
    spec: &SceneSpec,
    layout: Layout,
    cfa: CfaPhase,
    seed: u64,
) -> Result<(VideoSequence, GroundTruthFlow)> {
    let (h, w) = (spec.height, spec.width);
    let scene = match layout {
        Layout::Srgb => Scene::new(spec, 3, seed)?,
        Layout::RgbgPacked => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config("packed layout needs even resolution".into()));
            }
            Scene::new(spec, 3, seed)?
        }
    };
    let (frames, fh, fw, scale) = match layout {
        Layout::Srgb => ((0..spec.length).map(|k| scene.render_frame(k)).collect::<Vec<_>>(), h, w, 1.0),
        Layout::RgbgPacked => {
            let mosaics = (0..spec.length).map(|k| mosaic(&scene.render_frame(k), cfa)).collect::<Result<Vec<_>>>()?;
            let bayer = VideoSequence::new(id, Layout::Srgb, mosaics)?;
            let packed = pack_rgbg(&bayer, cfa)?;
            (packed.into_frames(), h / 2, w / 2, 0.5)
        }
    };
    let mut gt = GroundTruthFlow::new(fh, fw, spec.flow_radius);
    for dst in 0..spec.length {
        let lo = dst.saturating_sub(spec.flow_radius);
        let hi = (dst + spec.flow_radius).min(spec.length - 1);
        for src in lo..=hi {
            if src != dst {
                let (f, o) = scene.flow_with_occlusion(src, dst, fh, fw, scale);
                gt.insert(src, dst, f, o);
            }
        }
    }
    Ok((VideoSequence::new(id, layout, frames)?, gt))
}
