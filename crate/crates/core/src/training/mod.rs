//! Stage-1 and stage-2 trainers: loss, schedule, update, validation and
//! checkpointing.

pub mod prepare;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignConfig;
use crate::autograd::{clip_grad_norm, Adam, Graph, ParamStore, Tensor, Var};
use crate::backbone::{Arch, InputKind, Mode, ModelState, SkipKind};
use crate::error::{Error, Result};
use crate::evaluation::psnr_frame;
use crate::priors::Priors;
use crate::rng::{derive_seed, label_key};
use crate::synth::dataset::Dataset;
use crate::synth::window::TemporalWindow;
use crate::video::Frame;

pub use prepare::{
    blind_inputs, compute_anchors, estimate_frames, nonblind_inputs, predict, predict_frames, preprocess, recorrupt_window,
    recorrupted_inputs, AnchorFrame, BatchTensors, Preprocessed, StageInputs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    L1,
    L2,
}

impl Loss {
    pub fn apply<T: crate::autograd::Real>(self, g: &mut Graph<T>, pred: Var, target: Var) -> Var {
        match self {
            Loss::L1 => g.l1_loss(pred, target),
            Loss::L2 => g.l2_loss(pred, target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub levels: usize,
    pub align: AlignConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 16, levels: 4, align: AlignConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: Loss,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub window: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Validate every this many iterations (0 = only at start and end).
    pub val_every: usize,
    /// Centre positions validated per validation clip.
    pub val_frames: usize,
    pub model: ModelConfig,
    pub stage1_skip: SkipKind,
    pub stage2_skip: SkipKind,
    pub stage1_input: InputKind,
    /// Recorrupt `x̂_t` instead of a stage-1 anchor.
    pub stage2_alone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::L1,
            lr: 3e-4,
            iters: 2000,
            batch: 4,
            patch: 48,
            window: 5,
            seed: 0,
            grad_clip: 1.0,
            val_every: 250,
            val_frames: 6,
            model: ModelConfig::default(),
            stage1_skip: SkipKind::Faam,
            stage2_skip: SkipKind::Fdam,
            stage1_input: InputKind::Joint,
            stage2_alone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("training.iters, training.batch and training.patch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("training.lr must be positive, got {}", self.lr)));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("training.grad_clip must be positive".into()));
        }
        crate::synth::window::check_window_size(self.window)
    }

    pub fn arch(&self, stage: Stage, data_channels: usize) -> Arch {
        let (mode, skip, input) = match stage {
            Stage::One => (Mode::Blind, self.stage1_skip, self.stage1_input),
            Stage::Two => (Mode::Nonblind, self.stage2_skip, InputKind::Joint),
        };
        Arch {
            mode,
            skip,
            input,
            data_channels,
            width: self.model.width,
            levels: self.model.levels,
            window: self.window,
            align: self.model.align,
        }
    }
}

/// `lr0 * (1 + cos(pi * k / iters)) / 2`.
pub fn cosine_lr(lr0: f64, k: usize, iters: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / iters as f64).cos())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

/// Frozen inputs of stage 2.
#[derive(Debug, Clone)]
pub struct Stage1Ref<'a> {
    pub state: &'a ModelState,
    /// Digest of the checkpoint the state was loaded from.
    pub id: String,
}

/// Mutable training state: parameters, optimizer and iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub state: ModelState,
    pub adam: Adam<f32>,
    pub iteration: usize,
    pub cfg: TrainConfig,
    pub stage: Stage,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, stage: Stage, data_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let seed = derive_seed(&[cfg.seed, label_key("init"), stage as u64]);
        let state = ModelState::init(cfg.arch(stage, data_channels), seed)?;
        let adam = Adam::new(&state.params);
        Ok(Self { state, adam, iteration: 0, cfg: *cfg, stage })
    }

    /// One optimizer update on prepared inputs. Returns the loss before the update.
    pub fn step(&mut self, items: &[StageInputs], dump_dir: Option<&Path>) -> Result<f64> {
        let b = BatchTensors::<f32>::new(items, self.state.arch.levels)?;
        let mut g = Graph::with_params(&self.state.params, true);
        let out = predict(&self.state, &mut g, &b)?;
        let target = g.input(b.target.clone().ok_or_else(|| Error::Input("training inputs carry no target".into()))?);
        let loss = self.cfg.loss.apply(&mut g, out, target);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            let dump = dump_dir.unwrap_or(Path::new(".")).join(format!("divergence_{:06}.ckpt", self.iteration));
            self.save(&dump, &serde_json::json!({"loss": lv.to_string()}))?;
            return Err(Error::Divergence { iteration: self.iteration, dump });
        }
        let mut grads = g.backward(loss).param_grads(&self.state.params);
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = cosine_lr(self.cfg.lr, self.iteration, self.cfg.iters);
        self.adam.update(&mut self.state.params, &grads, lr);
        self.iteration += 1;
        Ok(lv)
    }

    fn moments(&self) -> (ParamStore<f32>, ParamStore<f32>) {
        let mk = |ts: &[Tensor<f32>]| {
            let mut s = ParamStore::new();
            for ((name, _), t) in self.state.params.iter().zip(ts) {
                s.add(name, t.clone());
            }
            s
        };
        (mk(&self.adam.m), mk(&self.adam.v))
    }

    /// Model checkpoint with optimizer state and iteration counter.
    pub fn save(&self, path: &Path, info: &serde_json::Value) -> Result<String> {
        let (m, v) = self.moments();
        let meta = serde_json::json!({
            "arch": self.state.arch,
            "info": info,
            "stage": self.stage,
            "iteration": self.iteration,
            "adam_step": self.adam.step,
            "config": self.cfg,
        });
        crate::checkpoint::save(
            path,
            crate::backbone::CHECKPOINT_KIND,
            &meta,
            &[("params", &self.state.params), ("adam_m", &m), ("adam_v", &v)],
        )
    }
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn first_val(&self) -> Option<&LogRow> {
        self.log.iter().find(|r| r.val_psnr.is_some())
    }

    pub fn last_val(&self) -> Option<&LogRow> {
        self.log.iter().rev().find(|r| r.val_psnr.is_some())
    }
}

/// Stage-1 inputs for a batch of windows.
pub fn stage1_batch(windows: &[TemporalWindow], priors: &Priors, kind: InputKind) -> Result<Vec<StageInputs>> {
    windows.iter().map(|w| blind_inputs(&preprocess(w, priors)?, kind)).collect()
}

/// Stage-2 inputs for a batch: anchors from the frozen stage-1 state (or
/// `x̂_t` in stage-2-alone mode), then recorruption.
pub fn stage2_batch(
    windows: &[(TemporalWindow, u64)],
    priors: &Priors,
    noise: &crate::noise::NoiseModel,
    stage1: Option<&Stage1Ref>,
) -> Result<Vec<StageInputs>> {
    let pres = windows.iter().map(|(w, _)| preprocess(w, priors)).collect::<Result<Vec<_>>>()?;
    let anchors = match stage1 {
        Some(s1) => {
            let inputs = pres.iter().map(|p| blind_inputs(p, InputKind::Joint)).collect::<Result<Vec<_>>>()?;
            compute_anchors(s1.state, &s1.id, &inputs)?
        }
        None => pres
            .iter()
            .map(|p| {
                let zero = Frame::zeros(p.noisy[0].channels(), p.noisy[0].height(), p.noisy[0].width());
                AnchorFrame::new(&p.baselines[p.center], &zero, "stage2-alone", &p.key)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    windows
        .iter()
        .zip(&pres)
        .zip(&anchors)
        .map(|(((w, seed), p), a)| {
            let s = derive_seed(&[*seed, label_key("recorrupt")]);
            recorrupted_inputs(w, p, a, noise, priors, s).map(|(i, _)| i)
        })
        .collect()
}

/// Validation centre positions: `count` evenly spaced frames per clip.
fn val_positions(len: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, len);
    (0..count).map(|k| (k * len + len / 2) / count).collect()
}

/// Validation loss (on the stage objective) and PSNR of the stage's frame
/// estimate against clean frames: the anchor for stage 1, the inference
/// output for stage 2.
pub fn validate(
    state: &ModelState,
    cfg: &TrainConfig,
    data: &Dataset,
    priors: &Priors,
    stage1: Option<&Stage1Ref>,
) -> Result<(f64, f64)> {
    let mut windows = Vec::new();
    for (ci, clip) in data.val.iter().enumerate() {
        for t in val_positions(clip.noisy.len(), cfg.val_frames) {
            let (w, c) = clip.window(t, cfg.window)?;
            let c = c.ok_or_else(|| Error::Input("validation clips need clean frames".into()))?;
            windows.push((w, c.center_frame().clone(), derive_seed(&[cfg.seed, label_key("val"), ci as u64, t as u64])));
        }
    }
    if windows.is_empty() {
        return Err(Error::Config("validation needs at least one validation clip".into()));
    }
    let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
    for chunk in windows.chunks(cfg.batch.max(1)) {
        let (objective, estimates) = match state.arch.mode {
            Mode::Blind => {
                let wins: Vec<TemporalWindow> = chunk.iter().map(|c| c.0.clone()).collect();
                let inputs = stage1_batch(&wins, priors, state.arch.input)?;
                (inputs.clone(), estimate_frames(state, &inputs)?)
            }
            Mode::Nonblind => {
                let pairs: Vec<(TemporalWindow, u64)> = chunk.iter().map(|c| (c.0.clone(), c.2)).collect();
                let obj = stage2_batch(&pairs, priors, &data.noise, stage1)?;
                let inf = chunk
                    .iter()
                    .map(|c| nonblind_inputs(&preprocess(&c.0, priors)?, InputKind::Joint))
                    .collect::<Result<Vec<_>>>()?;
                (obj, estimate_frames(state, &inf)?)
            }
        };
        let preds = predict_frames(state, &objective)?;
        for ((p, o), (e, c)) in preds.iter().zip(&objective).zip(estimates.iter().zip(chunk)) {
            let target = o.target.as_ref().expect("training inputs carry targets");
            loss_sum += frame_loss(cfg.loss, p, target)?;
            psnr_sum += psnr_frame(e, &c.1)?;
        }
    }
    let n = windows.len() as f64;
    Ok((loss_sum / n, psnr_sum / n))
}

/// Mean absolute or squared error between two frames, in double precision.
pub fn frame_loss(loss: Loss, a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Input("loss operands differ in shape".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            match loss {
                Loss::L1 => d.abs(),
                Loss::L2 => d * d,
            }
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["iteration", "lr", "loss", "val_loss", "val_psnr"]).map_err(|e| Error::format(path, e.to_string()))?;
    for r in log {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record([
            r.iteration.to_string(),
            format!("{:.6e}", r.lr),
            format!("{:.6}", r.loss),
            opt(r.val_loss),
            opt(r.val_psnr),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full training loop for one stage. Writes `model.ckpt` and `train_log.csv`
/// under `out_dir`.
pub fn run_training(
    cfg: &TrainConfig,
    stage: Stage,
    data: &Dataset,
    priors: &Priors,
    stage1: Option<&Stage1Ref>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let channels = data.train.first().ok_or_else(|| Error::Config("dataset has no training clips".into()))?.noisy.dims().0;
    if stage == Stage::Two && !cfg.stage2_alone {
        let s1 = stage1.ok_or_else(|| Error::MissingDependency {
            key: "training.stage1_ckpt".into(),
            detail: "stage 2 needs a trained stage-1 checkpoint".into(),
        })?;
        if s1.state.arch.mode != Mode::Blind || s1.state.arch.input != InputKind::Joint {
            return Err(Error::Mode("the stage-1 checkpoint must hold a blind joint-input state".into()));
        }
        if s1.state.arch.window != cfg.window {
            return Err(Error::Config(format!(
                "stage-1 window T={} differs from training.window={}",
                s1.state.arch.window, cfg.window
            )));
        }
    }
    let stage1 = if cfg.stage2_alone { None } else { stage1 };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let frozen_before = (priors.checksum(), stage1.map(|s| s.state.params.checksum()));

    let mut tr = Trainer::new(cfg, stage, channels)?;
    let base = derive_seed(&[cfg.seed, label_key("samples"), stage as u64]);
    let mut log = Vec::with_capacity(cfg.iters + 1);
    let val = |state: &ModelState| validate(state, cfg, data, priors, stage1);
    let (vl, vp) = val(&tr.state)?;
    log.push(LogRow {
        iteration: 0,
        lr: cosine_lr(cfg.lr, 0, cfg.iters),
        loss: f64::NAN,
        val_loss: Some(vl),
        val_psnr: Some(vp),
    });
    log::info!("stage {stage:?} start: val loss {vl:.5}, val PSNR {vp:.3} dB");
    while tr.iteration < cfg.iters {
        let k = tr.iteration;
        let samples = (0..cfg.batch)
            .map(|b| data.sample(base, (k * cfg.batch + b) as u64, cfg.window, cfg.patch))
            .collect::<Result<Vec<_>>>()?;
        let items = match stage {
            Stage::One => {
                let wins: Vec<TemporalWindow> = samples.into_iter().map(|s| s.0).collect();
                stage1_batch(&wins, priors, cfg.stage1_input)?
            }
            Stage::Two => stage2_batch(&samples, priors, &data.noise, stage1)?,
        };
        let lr = cosine_lr(cfg.lr, k, cfg.iters);
        let loss = tr.step(&items, Some(out_dir))?;
        let done = tr.iteration == cfg.iters;
        let (val_loss, val_psnr) = if done || (cfg.val_every > 0 && tr.iteration % cfg.val_every == 0) {
            let (a, b) = val(&tr.state)?;
            log::info!("stage {stage:?} iter {}: loss {loss:.5}, val loss {a:.5}, val PSNR {b:.3} dB", tr.iteration);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        log.push(LogRow { iteration: tr.iteration, lr, loss, val_loss, val_psnr });
    }

    let frozen_after = (priors.checksum(), stage1.map(|s| s.state.params.checksum()));
    if frozen_before != frozen_after {
        return Err(Error::Invariant("frozen priors or stage-1 parameters changed during training".into()));
    }
    let info = serde_json::json!({
        "priors": priors.tag(),
        "priors_checksum": priors.checksum(),
        "dataset_digest": data.digest,
        "stage1_checkpoint": stage1.map(|s| s.id.clone()),
    });
    let ckpt = out_dir.join("model.ckpt");
    let digest = tr.save(&ckpt, &info)?;
    write_log(&out_dir.join("train_log.csv"), &log)?;
    Ok(TrainOutcome { state: tr.state, checkpoint: ckpt, digest, log })
}

#[cfg(test)]
mod tests;
