//! The run configuration: one TOML tree covering data, noise, priors, model,
//! training, inference, evaluation and ablation, with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{InputKind, SkipKind};
use crate::error::{Error, Result};
use crate::evaluation::AblationConfig;
use crate::inference::InferenceConfig;
use crate::noise::NoiseModel;
use crate::priors::{FlowEstimator, PriorTrainConfig};
use crate::synth::bayer::CfaPhase;
use crate::synth::dataset::DatasetSpec;
use crate::synth::scene::SceneSpec;
use crate::training::{Loss, ModelConfig, TrainConfig};
use crate::video::Layout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory; defaults to `<run dir>/data`.
    pub dir: Option<PathBuf>,
    pub train_clips: usize,
    pub val_clips: usize,
    pub layout: Layout,
    pub cfa_phase: CfaPhase,
    pub scene: SceneSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            dir: None,
            train_clips: d.train_clips,
            val_clips: d.val_clips,
            layout: d.layout,
            cfa_phase: d.cfa_phase,
            scene: d.scene,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            scene: self.scene.clone(),
            train_clips: self.train_clips,
            val_clips: self.val_clips,
            layout: self.layout,
            cfa_phase: self.cfa_phase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Identity,
    Classical,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorsSection {
    pub denoiser: DenoiserKind,
    /// Fixed smoother width; tuned against the noise model when absent.
    pub sigma_k: Option<f64>,
    /// Learned denoiser checkpoint; defaults to `<run dir>/prior/denoiser.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub learned: PriorTrainConfig,
    pub flow: FlowEstimator,
}

impl Default for PriorsSection {
    fn default() -> Self {
        Self {
            denoiser: DenoiserKind::Learned,
            sigma_k: None,
            checkpoint: None,
            learned: PriorTrainConfig::default(),
            flow: FlowEstimator::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub loss: Loss,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub window: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub val_every: usize,
    pub val_frames: usize,
    pub stage1_skip: SkipKind,
    pub stage2_skip: SkipKind,
    pub stage1_input: InputKind,
    pub stage2_alone: bool,
    /// Stage-1 checkpoint used by stage 2; defaults to `<run dir>/stage1/model.ckpt`.
    pub stage1_ckpt: Option<PathBuf>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss: t.loss,
            lr: t.lr,
            iters: t.iters,
            batch: t.batch,
            patch: t.patch,
            window: t.window,
            seed: t.seed,
            grad_clip: t.grad_clip,
            val_every: t.val_every,
            val_frames: t.val_frames,
            stage1_skip: t.stage1_skip,
            stage2_skip: t.stage2_skip,
            stage1_input: t.stage1_input,
            stage2_alone: t.stage2_alone,
            stage1_ckpt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub window: Option<usize>,
    pub tile: usize,
    pub overlap: Option<usize>,
    pub batch: usize,
    /// Refiner checkpoint; defaults to `<run dir>/stage2/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Dataset clips to denoise.
    pub split: SplitChoice,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let i = InferenceConfig::default();
        Self { window: i.window, tile: i.tile, overlap: i.overlap, batch: i.batch, checkpoint: None, split: SplitChoice::Val }
    }
}

impl InferenceSection {
    pub fn config(&self) -> InferenceConfig {
        InferenceConfig { window: self.window, tile: self.tile, overlap: self.overlap, batch: self.batch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Centre-frame perturbations per blindness audit.
    pub audit_trials: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { audit_trials: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub output_root: PathBuf,
    /// Seed of dataset generation and prior training.
    pub seed: u64,
    pub data: DataSection,
    pub noise: NoiseModel,
    pub priors: PriorsSection,
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub inference: InferenceSection,
    pub evaluation: EvaluationSection,
    pub ablate: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "desk".into(),
            output_root: PathBuf::from("runs"),
            seed: 0,
            data: DataSection::default(),
            noise: NoiseModel::awgn(0.1),
            priors: PriorsSection::default(),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            inference: InferenceSection::default(),
            evaluation: EvaluationSection::default(),
            ablate: AblationConfig::default(),
        }
    }
}

/// Every configuration key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("run_id", "name of the run directory under output_root"),
    ("output_root", "root directory of all run artifacts"),
    ("seed", "seed of dataset generation and prior training"),
    ("data.dir", "dataset directory (default <run dir>/data)"),
    ("data.train_clips", "number of training clips"),
    ("data.val_clips", "number of validation clips"),
    ("data.layout", "srgb | rgbg_packed"),
    ("data.cfa_phase", "RGGB | BGGR | GRBG | GBRG"),
    ("data.scene.height", "frame height in pixels"),
    ("data.scene.width", "frame width in pixels"),
    ("data.scene.length", "frames per clip"),
    ("data.scene.sprites", "moving sprites per clip"),
    ("data.scene.velocity", "sprite speed range [min, max], px/frame"),
    ("data.scene.background_velocity", "largest background pan speed, px/frame"),
    ("data.scene.sprite_radius", "sprite radius range [min, max], px"),
    ("data.scene.texture_max_freq", "highest texture frequency, cycles/px"),
    ("data.scene.texture_components", "sinusoids per texture"),
    ("data.scene.flow_radius", "largest frame distance with stored flows"),
    ("data.scene.patch", "training crop the motion budget is checked against"),
    ("noise.kind", "awgn | signal_dependent"),
    ("noise.sigma", "AWGN standard deviation"),
    ("noise.shot_gain", "signal-dependent variance slope"),
    ("noise.read_var", "signal-dependent variance offset"),
    ("noise.iso", "ISO tag of the signal-dependent profile"),
    ("priors.denoiser", "identity | classical | learned"),
    ("priors.sigma_k", "classical smoother width (tuned when absent)"),
    ("priors.checkpoint", "learned denoiser checkpoint (default <run dir>/prior/denoiser.ckpt)"),
    ("priors.learned.width", "learned denoiser channels"),
    ("priors.learned.depth", "learned denoiser conv layers"),
    ("priors.learned.iters", "learned denoiser iterations"),
    ("priors.learned.batch", "learned denoiser batch size"),
    ("priors.learned.patch", "learned denoiser crop size"),
    ("priors.learned.lr", "learned denoiser learning rate"),
    ("priors.learned.clips", "clips in the learned denoiser's training set"),
    ("priors.flow.kind", "ground_truth | block_matching"),
    ("priors.flow.radius", "block-matching search radius, px"),
    ("priors.flow.block", "block-matching block size, px"),
    ("model.width", "base channel width C"),
    ("model.levels", "U-Net levels L"),
    ("model.align.reduction", "channel-attention reduction ratio"),
    ("model.align.spatial_kernel", "spatial-attention kernel size"),
    ("model.align.dcn_kernel", "deformable kernel size"),
    ("model.align.groups", "deformable groups"),
    ("model.align.delta_max", "clamp on regressed offsets, px"),
    ("training.loss", "l1 | l2"),
    ("training.lr", "peak learning rate (cosine schedule)"),
    ("training.iters", "iterations per stage"),
    ("training.batch", "windows per iteration"),
    ("training.patch", "crop size"),
    ("training.window", "temporal window T (odd)"),
    ("training.seed", "seed of initialisation and sampling"),
    ("training.grad_clip", "gradient-norm clip"),
    ("training.val_every", "validation period in iterations (0 = start and end only)"),
    ("training.val_frames", "centre positions validated per validation clip"),
    ("training.stage1_skip", "faam | fdam | direct"),
    ("training.stage2_skip", "faam | fdam | direct"),
    ("training.stage1_input", "joint | raw"),
    ("training.stage2_alone", "recorrupt the denoiser output instead of a stage-1 anchor"),
    ("training.stage1_ckpt", "stage-1 checkpoint for stage 2 (default <run dir>/stage1/model.ckpt)"),
    ("inference.window", "temporal window; must match the refiner"),
    ("inference.tile", "tile core size, 0 = whole frames"),
    ("inference.overlap", "tile halo (default: receptive radius)"),
    ("inference.batch", "windows per network call"),
    ("inference.checkpoint", "refiner checkpoint (default <run dir>/stage2/model.ckpt)"),
    ("inference.split", "train | val | all"),
    ("evaluation.audit_trials", "centre perturbations per blindness audit"),
    ("ablate.suite", "stages | components | alignment_pairing | window_T"),
    ("ablate.seeds", "training seeds per arm"),
    ("ablate.windows", "window sizes of the window_T suite"),
    ("ablate.cache_dir", "trained-model cache (default <output_root>/cache)"),
];

/// Keys under any of the given prefixes (a prefix names a key or a section).
pub fn keys_under(prefixes: &[&str]) -> Vec<(&'static str, &'static str)> {
    KEYS.iter().copied().filter(|(k, _)| prefixes.iter().any(|p| k == p || k.starts_with(&format!("{p}.")))).collect()
}

fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config(format!("--set {item}: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("--set {item}: malformed key")));
    }
    let raw = raw.trim();
    // A bare word that is not a TOML literal is taken as a string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("keys are non-empty");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("--set {key}: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text; errors carry the line and column of the offending
    /// entry.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    /// Parses `text`, applies `key=value` overrides and validates.
    pub fn resolve(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::from_toml(text, origin)?;
        if !overrides.is_empty() {
            // Overrides apply on top of the parsed file with defaults filled in.
            let mut table = match toml::Value::try_from(&cfg) {
                Ok(toml::Value::Table(t)) => t,
                _ => unreachable!("run configurations serialise to tables"),
            };
            for o in overrides {
                let (k, v) = parse_override(o)?;
                set_path(&mut table, &k, v)?;
            }
            cfg = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("after --set overrides: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&text, &path.display().to_string(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(Error::Config(format!("run_id `{}` is not a plain directory name", self.run_id)));
        }
        self.data.scene.validate()?;
        if self.data.train_clips == 0 {
            return Err(Error::Config("data.train_clips must be positive".into()));
        }
        self.noise.validate()?;
        if let Some(s) = self.priors.sigma_k {
            crate::priors::GaussianSmoother::new(s)?;
        }
        self.train_config().validate()?;
        if self.inference.batch == 0 {
            return Err(Error::Config("inference.batch must be positive".into()));
        }
        if self.evaluation.audit_trials == 0 {
            return Err(Error::Config("evaluation.audit_trials must be positive".into()));
        }
        self.ablate.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_id)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.run_dir().join("data"))
    }

    pub fn prior_checkpoint(&self) -> PathBuf {
        self.priors.checkpoint.clone().unwrap_or_else(|| self.run_dir().join("prior").join("denoiser.ckpt"))
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.training.stage1_ckpt.clone().unwrap_or_else(|| self.run_dir().join("stage1").join("model.ckpt"))
    }

    pub fn refiner_checkpoint(&self) -> PathBuf {
        self.inference.checkpoint.clone().unwrap_or_else(|| self.run_dir().join("stage2").join("model.ckpt"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.ablate.cache_dir.clone().unwrap_or_else(|| self.output_root.join("cache"))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            loss: t.loss,
            lr: t.lr,
            iters: t.iters,
            batch: t.batch,
            patch: t.patch,
            window: t.window,
            seed: t.seed,
            grad_clip: t.grad_clip,
            val_every: t.val_every,
            val_frames: t.val_frames,
            model: self.model,
            stage1_skip: t.stage1_skip,
            stage2_skip: t.stage2_skip,
            stage1_input: t.stage1_input,
            stage2_alone: t.stage2_alone,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configurations serialise")
    }
}
