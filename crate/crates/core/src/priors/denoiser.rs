//! Frozen frame denoisers `D`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{clip_grad_norm, Adam, Graph, ParamId, ParamStore, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::noise::{sample_recorruption, NoiseModel};
use crate::rng::{derive_seed, label_key, rng_for};
use crate::synth::dataset::{Dataset, DatasetSpec};
use crate::video::Frame;

const SLOPE: f64 = 0.1;
pub const CHECKPOINT_KIND: &str = "denoiser";

/// Separable Gaussian smoother with replicated borders.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSmoother {
    sigma_k: f64,
    taps: Vec<f32>,
}

impl GaussianSmoother {
    pub fn new(sigma_k: f64) -> Result<Self> {
        if !(sigma_k.is_finite() && sigma_k > 0.0) {
            return Err(Error::Parameter(format!("smoother sigma must be positive, got {sigma_k}")));
        }
        let radius = (3.0 * sigma_k).ceil() as i64;
        let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma_k * sigma_k)).exp()).collect();
        let sum: f64 = raw.iter().sum();
        Ok(Self { sigma_k, taps: raw.iter().map(|v| (v / sum) as f32).collect() })
    }

    pub fn sigma_k(&self) -> f64 {
        self.sigma_k
    }

    pub fn taps(&self) -> &[f32] {
        &self.taps
    }

    /// Picks the kernel width from a fixed grid that maximises PSNR on a
    /// seeded synthetic calibration set corrupted with `noise`.
    pub fn tuned_for(noise: &NoiseModel) -> Result<Self> {
        noise.validate()?;
        let spec = DatasetSpec { train_clips: 2, val_clips: 0, ..DatasetSpec::default() };
        let spec = DatasetSpec { scene: crate::synth::SceneSpec { length: 3, ..spec.scene }, ..spec };
        let cal = Dataset::synthetic(&spec, noise, label_key("smoother-calibration"))?;
        let mut best: Option<(f64, f64)> = None;
        for step in 0..=26 {
            let s = 0.4 + 0.1 * step as f64;
            let g = Self::new(s)?;
            let mut mse = 0.0;
            for clip in &cal.train {
                let clean = clip.clean.as_ref().expect("synthetic clips carry clean frames");
                for (y, x) in clip.noisy.frames().iter().zip(clean.frames()) {
                    let d = g.apply(y);
                    mse += d.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
                }
            }
            if best.is_none_or(|(_, m)| mse < m) {
                best = Some((s, mse));
            }
        }
        Self::new(best.expect("non-empty grid").0)
    }

    pub fn apply(&self, y: &Frame) -> Frame {
        let (c, h, w) = y.dims();
        let r = (self.taps.len() / 2) as isize;
        let mut out = Frame::zeros(c, h, w);
        let mut tmp = vec![0.0f32; h * w];
        for ch in 0..c {
            let src = y.plane(ch);
            for yy in 0..h {
                let row = &src[yy * w..(yy + 1) * w];
                for xx in 0..w {
                    let mut acc = 0.0f32;
                    for (k, &t) in self.taps.iter().enumerate() {
                        let sx = (xx as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += t * row[sx];
                    }
                    tmp[yy * w + xx] = acc;
                }
            }
            let dst = out.plane_mut(ch);
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0f32;
                    for (k, &t) in self.taps.iter().enumerate() {
                        let sy = (yy as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += t * tmp[sy * w + xx];
                    }
                    dst[yy * w + xx] = acc;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnedArch {
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
}

/// Small residual CNN `D(y) = y - g(y)` trained supervised, then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedDenoiser {
    arch: LearnedArch,
    params: ParamStore<f32>,
    layers: Vec<(ParamId, ParamId)>,
}

impl LearnedDenoiser {
    pub fn init(arch: LearnedArch, seed: u64) -> Result<Self> {
        if arch.channels == 0 || arch.width == 0 || arch.depth < 2 {
            return Err(Error::Config("learned denoiser needs channels, width >= 1 and depth >= 2".into()));
        }
        let mut rng = rng_for(&[seed, label_key("denoiser-init")]);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for i in 0..arch.depth {
            let cin = if i == 0 { arch.channels } else { arch.width };
            let cout = if i + 1 == arch.depth { arch.channels } else { arch.width };
            let w = params.add_conv(&format!("conv{i}.w"), cout, cin, 3, &mut rng);
            let b = params.add_zeros(&format!("conv{i}.b"), [1, cout, 1, 1]);
            layers.push((w, b));
        }
        // Start near the identity mapping.
        let last = layers[arch.depth - 1].0;
        params.get_mut(last).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Ok(Self { arch, params, layers })
    }

    pub fn arch(&self) -> LearnedArch {
        self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            h = g.conv2d(h, w, Some(b), 1, 1);
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, SLOPE);
            }
        }
        g.sub(x, h)
    }

    pub fn apply(&self, y: &Frame) -> Result<Frame> {
        if y.channels() != self.arch.channels {
            return Err(Error::Input(format!("denoiser expects {} channels, frame has {}", self.arch.channels, y.channels())));
        }
        let mut g = Graph::with_params(&self.params, false);
        let x = g.input(y.to_tensor());
        let out = self.forward(&mut g, x);
        Ok(Frame::from_tensor(g.value(out), 0))
    }

    pub fn save(&self, path: &Path, meta: &PriorTrainReport) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            arch: LearnedArch,
            report: &'a PriorTrainReport,
        }
        checkpoint::save(path, CHECKPOINT_KIND, &Meta { arch: self.arch, report: meta }, &[("params", &self.params)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            arch: LearnedArch,
        }
        let ck = checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let meta: Meta = ck.meta_as(path)?;
        let mut model = Self::init(meta.arch, 0)?;
        let stored = ck.group("params", path)?;
        if stored.len() != model.params.len()
            || stored.iter().zip(model.params.iter()).any(|((a, x), (b, y))| a != b || x.shape() != y.shape())
        {
            return Err(Error::format(path, "parameter layout does not match the declared architecture"));
        }
        model.params = stored.clone();
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTrainConfig {
    pub width: usize,
    pub depth: usize,
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub clips: usize,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self { width: 32, depth: 6, iters: 4000, batch: 4, patch: 48, lr: 1e-3, clips: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainReport {
    pub losses: Vec<f64>,
    pub val_psnr_noisy: f64,
    pub val_psnr_denoised: f64,
}

/// Supervised training on a synthetic set generated from its own seed
/// stream, disjoint from the clips used by the video trainers.
pub fn train_learned_denoiser(
    cfg: &PriorTrainConfig,
    data: &DatasetSpec,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(LearnedDenoiser, PriorTrainReport)> {
    if cfg.iters == 0 || cfg.batch == 0 || cfg.patch == 0 || cfg.clips == 0 {
        return Err(Error::Config("prior training needs positive iters, batch, patch and clips".into()));
    }
    let spec = DatasetSpec { train_clips: cfg.clips, val_clips: 1, ..data.clone() };
    let ds = Dataset::synthetic(&spec, noise, derive_seed(&[seed, label_key("prior-data")]))?;
    let channels = ds.train[0].noisy.dims().0;
    let mut model = LearnedDenoiser::init(LearnedArch { channels, width: cfg.width, depth: cfg.depth }, seed)?;
    let mut adam = Adam::new(&model.params);
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut noisy = Vec::with_capacity(cfg.batch);
        let mut clean = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let s = derive_seed(&[seed, label_key("prior-sample"), it as u64, b as u64]);
            let mut rng = rng_for(&[s]);
            let clip = &ds.train[rand::Rng::gen_range(&mut rng, 0..ds.train.len())];
            let clean_seq = clip.clean.as_ref().expect("synthetic clips carry clean frames");
            let k = rand::Rng::gen_range(&mut rng, 0..clean_seq.len());
            let (_, h, w) = clean_seq.dims();
            let p = cfg.patch.min(h).min(w);
            let y0 = rand::Rng::gen_range(&mut rng, 0..=h - p);
            let x0 = rand::Rng::gen_range(&mut rng, 0..=w - p);
            let x = clean_seq.frame(k).crop(y0, x0, p, p)?;
            let n = sample_recorruption(x.dims(), noise, Some(&x), derive_seed(&[s, 1]))?;
            noisy.push(x.add(&n)?);
            clean.push(x);
        }
        let xs: Vec<&Frame> = noisy.iter().collect();
        let cs: Vec<&Frame> = clean.iter().collect();
        let mut g = Graph::with_params(&model.params, true);
        let input = g.input(Frame::batch_tensor(&xs));
        let target = g.input(Frame::batch_tensor(&cs));
        let out = model.forward(&mut g, input);
        let loss = g.l2_loss(out, target);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Invariant(format!("prior training loss became {lv} at iteration {it}")));
        }
        let mut grads = g.backward(loss).param_grads(&model.params);
        clip_grad_norm(&mut grads, 1.0);
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iters as f64).cos());
        adam.update(&mut model.params, &grads, lr);
        losses.push(lv);
    }
    let (mut pn, mut pd, mut n) = (0.0, 0.0, 0usize);
    for clip in &ds.val {
        let clean_seq = clip.clean.as_ref().expect("synthetic clips carry clean frames");
        for (y, x) in clip.noisy.frames().iter().zip(clean_seq.frames()) {
            pn += crate::evaluation::psnr_frame(y, x)?;
            pd += crate::evaluation::psnr_frame(&model.apply(y)?, x)?;
            n += 1;
        }
    }
    let report = PriorTrainReport { losses, val_psnr_noisy: pn / n as f64, val_psnr_denoised: pd / n as f64 };
    Ok((model, report))
}

/// A frozen deterministic frame-to-frame mapping.
#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    Identity,
    Classical(GaussianSmoother),
    Learned(LearnedDenoiser),
}

impl Denoiser {
    pub fn denoise(&self, y: &Frame) -> Result<Frame> {
        match self {
            Denoiser::Identity => Ok(y.clone()),
            Denoiser::Classical(g) => Ok(g.apply(y)),
            Denoiser::Learned(m) => m.apply(y),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Denoiser::Identity => "identity".into(),
            Denoiser::Classical(g) => format!("classical(sigma_k={})", g.sigma_k()),
            Denoiser::Learned(m) => format!("learned(width={},depth={})", m.arch.width, m.arch.depth),
        }
    }

    /// Digest of the variant and every fixed parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tag().as_bytes());
        match self {
            Denoiser::Identity => {}
            Denoiser::Classical(g) => g.taps().iter().for_each(|t| h.update(t.to_le_bytes())),
            Denoiser::Learned(m) => h.update(m.params.checksum().as_bytes()),
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SceneSpec;

    #[test]
    fn smoother_preserves_constants_and_is_deterministic() {
        let g = GaussianSmoother::new(1.3).unwrap();
        let f = Frame::filled(3, 9, 7, 0.37);
        let out = g.apply(&f);
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        let y = Frame::new(1, 4, 5, (0..20).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        assert_eq!(g.apply(&y), g.apply(&y));
        assert!(GaussianSmoother::new(0.0).is_err());
    }

    #[test]
    fn smoother_matches_direct_replicate_border_oracle() {
        let g = GaussianSmoother::new(0.8).unwrap();
        let (h, w) = (6, 5);
        let y = Frame::new(1, h, w, (0..h * w).map(|i| ((i * 7919) % 13) as f32 / 13.0).collect()).unwrap();
        let out = g.apply(&y);
        let taps: Vec<f64> = g.taps().iter().map(|&t| t as f64).collect();
        let r = (taps.len() / 2) as isize;
        for yy in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for (i, ty) in taps.iter().enumerate() {
                    for (j, tx) in taps.iter().enumerate() {
                        let sy = (yy + i as isize - r).clamp(0, h as isize - 1) as usize;
                        let sx = (xx + j as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += ty * tx * y.get(0, sy, sx) as f64;
                    }
                }
                assert!((acc - out.get(0, yy as usize, xx as usize) as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tuned_width_grows_with_noise() {
        let lo = GaussianSmoother::tuned_for(&NoiseModel::awgn(0.02)).unwrap();
        let hi = GaussianSmoother::tuned_for(&NoiseModel::awgn(0.2)).unwrap();
        assert!(hi.sigma_k() > lo.sigma_k());
    }

    #[test]
    fn learned_denoiser_round_trips_and_checks_channels() {
        let m = LearnedDenoiser::init(LearnedArch { channels: 3, width: 4, depth: 3 }, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        let rep = PriorTrainReport { losses: vec![], val_psnr_noisy: 0.0, val_psnr_denoised: 0.0 };
        m.save(&p, &rep).unwrap();
        let back = LearnedDenoiser::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(Denoiser::Learned(back).checksum(), Denoiser::Learned(m.clone()).checksum());
        assert!(m.apply(&Frame::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn short_supervised_training_beats_the_noisy_input() {
        let data = DatasetSpec {
            scene: SceneSpec { height: 32, width: 32, length: 4, patch: 32, flow_radius: 1, ..SceneSpec::default() },
            ..DatasetSpec::default()
        };
        let cfg = PriorTrainConfig { width: 8, depth: 3, iters: 150, batch: 2, patch: 24, lr: 2e-3, clips: 2 };
        let (_, rep) = train_learned_denoiser(&cfg, &data, &NoiseModel::awgn(0.1), 3).unwrap();
        assert!(rep.val_psnr_denoised > rep.val_psnr_noisy, "{rep:?}");
    }
}
