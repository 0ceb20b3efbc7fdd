//! Ablation suites. Each arm is trained over several seeds, evaluated on the
//! validation clips and written out as CSV, JSON and charts. Trained models
//! are cached by a digest of everything that determines them, so arms shared
//! between suites are trained once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{InputKind, ModelState, SkipKind};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{psnr_frame, ssim_frame};
use crate::evaluation::plot;
use crate::inference::{denoise_video, InferenceConfig};
use crate::priors::Priors;
use crate::synth::dataset::Dataset;
use crate::training::{estimate_frames, run_training, stage1_batch, Stage, Stage1Ref, TrainConfig};
use crate::video::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Stages,
    Components,
    AlignmentPairing,
    #[serde(rename = "window_T")]
    WindowT,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Stages => "stages",
            Suite::Components => "components",
            Suite::AlignmentPairing => "alignment_pairing",
            Suite::WindowT => "window_T",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::Stages, Suite::Components, Suite::AlignmentPairing, Suite::WindowT]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub suite: Suite,
    /// Training seeds; every arm runs once per seed.
    pub seeds: Vec<u64>,
    /// Window sizes of the `window_T` suite.
    pub windows: Vec<usize>,
    /// Trained-model cache shared by all suites.
    pub cache_dir: Option<PathBuf>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { suite: Suite::Stages, seeds: vec![0, 1, 2], windows: vec![3, 5, 7, 9], cache_dir: None }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        if self.suite == Suite::WindowT {
            if self.windows.len() < 2 {
                return Err(Error::Config("ablate.windows needs at least two sizes".into()));
            }
            self.windows.iter().try_for_each(|&t| crate::synth::window::check_window_size(t))?;
        }
        Ok(())
    }
}

/// What an arm trains and how its output is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plan {
    /// The frozen denoiser alone.
    Prior,
    /// A stage-1 state; its estimate is the network output plus the base.
    Stage1 { window: usize, skip: SkipKind, input: InputKind },
    /// A stage-2 refiner run through inference; `stage1: None` trains it on
    /// recorrupted baselines instead of anchors.
    Pipeline { window: usize, stage1: Option<SkipKind>, stage2: SkipKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Arm {
    pub name: String,
    pub plan: Plan,
}

fn arm(name: &str, plan: Plan) -> Arm {
    Arm { name: name.into(), plan }
}

/// Arms of a suite; `base` supplies the window and skip defaults.
pub fn suite_arms(suite: Suite, base: &TrainConfig, windows: &[usize]) -> Vec<Arm> {
    let t = base.window;
    let s1 = |skip, input| Plan::Stage1 { window: t, skip, input };
    match suite {
        Suite::Stages => vec![
            arm("d_only", Plan::Prior),
            arm("stage1_only", s1(base.stage1_skip, InputKind::Joint)),
            arm("stage2_alone", Plan::Pipeline { window: t, stage1: None, stage2: base.stage2_skip }),
            arm("full", Plan::Pipeline { window: t, stage1: Some(base.stage1_skip), stage2: base.stage2_skip }),
        ],
        Suite::Components => vec![
            arm("stacking", s1(SkipKind::Direct, InputKind::Raw)),
            arm("flow_guidance", s1(SkipKind::Faam, InputKind::Raw)),
            arm("joint_inputs", s1(SkipKind::Direct, InputKind::Joint)),
            arm("both", s1(SkipKind::Faam, InputKind::Joint)),
        ],
        Suite::AlignmentPairing => [
            ("faam_faam", SkipKind::Faam, SkipKind::Faam),
            ("fdam_fdam", SkipKind::Fdam, SkipKind::Fdam),
            ("faam_fdam", SkipKind::Faam, SkipKind::Fdam),
        ]
        .into_iter()
        .map(|(n, a, b)| arm(n, Plan::Pipeline { window: t, stage1: Some(a), stage2: b }))
        .collect(),
        Suite::WindowT => windows
            .iter()
            .map(|&w| arm(&format!("t{w}"), Plan::Stage1 { window: w, skip: base.stage1_skip, input: InputKind::Joint }))
            .collect(),
    }
}

/// Per-frame and mean quality of one arm under one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    /// Frames of all validation clips in order; `null` in JSON stands for
    /// the +inf PSNR of an exact match.
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub config: serde_json::Value,
}

/// Per-frame PSNR and SSIM of estimates against clean frames.
pub fn score(estimates: &[Frame], clean: &[Frame]) -> Result<(Vec<f64>, Vec<f64>)> {
    if estimates.len() != clean.len() {
        return Err(Error::Input(format!("{} estimates for {} clean frames", estimates.len(), clean.len())));
    }
    let psnr = estimates.iter().zip(clean).map(|(a, b)| psnr_frame(a, b)).collect::<Result<Vec<_>>>()?;
    let ssim = estimates.iter().zip(clean).map(|(a, b)| ssim_frame(a, b)).collect::<Result<Vec<_>>>()?;
    Ok((psnr, ssim))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Clean validation frames in evaluation order.
pub fn validation_targets(data: &Dataset) -> Result<Vec<Frame>> {
    if data.val.is_empty() {
        return Err(Error::Config("evaluation needs at least one validation clip".into()));
    }
    let mut out = Vec::new();
    for clip in &data.val {
        let clean = clip.clean.as_ref().ok_or_else(|| Error::Input(format!("clip {} has no clean frames", clip.id())))?;
        out.extend(clean.frames().iter().cloned());
    }
    Ok(out)
}

/// `D(y_t)` for every validation frame.
pub fn prior_estimates(data: &Dataset, priors: &Priors) -> Result<Vec<Frame>> {
    data.val.iter().flat_map(|c| c.noisy.frames()).map(|y| priors.denoiser.denoise(y)).collect()
}

/// Stage-1 estimates for every validation frame.
pub fn stage1_estimates(state: &ModelState, data: &Dataset, priors: &Priors, batch: usize) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    for clip in &data.val {
        let positions: Vec<usize> = (0..clip.noisy.len()).collect();
        for chunk in positions.chunks(batch.max(1)) {
            let wins = chunk.iter().map(|&t| clip.window(t, state.arch.window).map(|w| w.0)).collect::<Result<Vec<_>>>()?;
            out.extend(estimate_frames(state, &stage1_batch(&wins, priors, state.arch.input)?)?);
        }
    }
    Ok(out)
}

/// Inference output for every validation frame.
pub fn pipeline_estimates(state: &ModelState, data: &Dataset, priors: &Priors, cfg: &InferenceConfig) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    for clip in &data.val {
        out.extend(denoise_video(state, &clip.noisy, clip.gt.as_ref(), priors, cfg)?.into_frames());
    }
    Ok(out)
}

/// A trained model and the digest of its checkpoint.
#[derive(Debug, Clone)]
pub struct Trained {
    pub state: ModelState,
    pub digest: String,
    pub checkpoint: PathBuf,
}

/// Content-addressed store of trained models.
#[derive(Debug, Clone)]
pub struct RunCache {
    root: PathBuf,
}

const CACHE_KEY_FILE: &str = "key.json";

impl RunCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Everything that determines the trained parameters.
    fn key(
        cfg: &TrainConfig,
        stage: Stage,
        data: &Dataset,
        priors: &Priors,
        stage1: Option<&Trained>,
    ) -> Result<serde_json::Value> {
        let channels = data.train.first().ok_or_else(|| Error::Config("dataset has no training clips".into()))?.noisy.dims().0;
        Ok(serde_json::json!({
            "stage": stage,
            "arch": cfg.arch(stage, channels),
            "loss": cfg.loss,
            "lr": cfg.lr,
            "iters": cfg.iters,
            "batch": cfg.batch,
            "patch": cfg.patch,
            "window": cfg.window,
            "seed": cfg.seed,
            "grad_clip": cfg.grad_clip,
            "val_every": cfg.val_every,
            "val_frames": cfg.val_frames,
            "stage2_alone": stage == Stage::Two && cfg.stage2_alone,
            "stage1": stage1.map(|s| s.digest.clone()),
            "dataset": data.digest,
            "priors": priors.checksum(),
        }))
    }

    /// Loads the cached model for this configuration or trains and stores it.
    pub fn train(
        &self,
        cfg: &TrainConfig,
        stage: Stage,
        data: &Dataset,
        priors: &Priors,
        stage1: Option<&Trained>,
    ) -> Result<Trained> {
        let key = Self::key(cfg, stage, data, priors, stage1)?;
        let text = serde_json::to_string_pretty(&key).expect("cache keys serialise");
        let dir = self.root.join(&hex::encode(Sha256::digest(text.as_bytes()))[..20]);
        let key_path = dir.join(CACHE_KEY_FILE);
        if let Ok(stored) = std::fs::read_to_string(&key_path) {
            if let Some(hit) = Self::lookup(&dir, &stored, &key) {
                log::info!("reusing cached model {}", dir.display());
                return Ok(hit);
            }
        }
        let s1 = stage1.map(|s| Stage1Ref { state: &s.state, id: s.digest.clone() });
        let out = run_training(cfg, stage, data, priors, s1.as_ref(), &dir)?;
        let record = serde_json::json!({ "key": key, "digest": out.digest });
        std::fs::write(&key_path, serde_json::to_string_pretty(&record).expect("cache records serialise"))
            .map_err(|e| Error::io(&key_path, e))?;
        Ok(Trained { state: out.state, digest: out.digest, checkpoint: out.checkpoint })
    }

    fn lookup(dir: &Path, stored: &str, key: &serde_json::Value) -> Option<Trained> {
        let record: serde_json::Value = serde_json::from_str(stored).ok()?;
        if record.get("key")? != key {
            return None;
        }
        let digest = record.get("digest")?.as_str()?;
        let path = dir.join("model.ckpt");
        let (state, ck) = ModelState::load(&path).ok()?;
        (ck.digest == digest).then(|| Trained { state, digest: digest.into(), checkpoint: path })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ArmStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub name: String,
    pub plan: Plan,
    pub status: ArmStatus,
    pub records: Vec<MetricsRecord>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    /// Chart colour of this arm.
    pub color: String,
}

/// Pass/fail of one expected ordering between arm means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub run_id: String,
    pub arms: Vec<ArmResult>,
    pub checks: Vec<TrendCheck>,
    pub config: serde_json::Value,
}

impl AblationReport {
    pub fn mean_psnr(&self, arm: &str) -> Option<f64> {
        self.arms.iter().find(|a| a.name == arm).and_then(|a| a.mean_psnr)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Expected orderings of a suite's mean PSNRs. A missing or failed arm fails
/// every check that reads it.
pub fn trend_checks(suite: Suite, arms: &[ArmResult], windows: &[usize]) -> Vec<TrendCheck> {
    let m = |n: &str| arms.iter().find(|a| a.name == n).and_then(|a| a.mean_psnr);
    let check = |name: &str, vals: Option<(bool, String)>| TrendCheck {
        name: name.into(),
        passed: vals.as_ref().is_some_and(|v| v.0),
        detail: vals.map(|v| v.1).unwrap_or_else(|| "missing or failed arm".into()),
    };
    match suite {
        Suite::Stages => vec![
            check(
                "full exceeds stage1_only by at least 0.3 dB",
                m("full").zip(m("stage1_only")).map(|(a, b)| (a - b >= 0.3, format!("gap {:.3} dB", a - b))),
            ),
            check(
                "stage1_only exceeds d_only by at least 0.3 dB",
                m("stage1_only").zip(m("d_only")).map(|(a, b)| (a - b >= 0.3, format!("gap {:.3} dB", a - b))),
            ),
            check(
                "stage2_alone within 0.5 dB of d_only",
                m("stage2_alone").zip(m("d_only")).map(|(a, b)| ((a - b).abs() <= 0.5, format!("difference {:.3} dB", a - b))),
            ),
        ],
        Suite::Components => {
            let gains = m("stacking").and_then(|b| Some((m("flow_guidance")? - b, m("joint_inputs")? - b)));
            let all: Option<Vec<f64>> = ["stacking", "flow_guidance", "joint_inputs", "both"].iter().map(|n| m(n)).collect();
            vec![
                check(
                    "joint-input gain exceeds flow-guidance gain",
                    gains.map(|(f, j)| (j > f, format!("joint {j:+.3} dB, flow {f:+.3} dB"))),
                ),
                check(
                    "combined arm is highest",
                    all.map(|v| {
                        let best = v[..3].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (v[3] > best, format!("both {:.3} dB vs best other {best:.3} dB", v[3]))
                    }),
                ),
            ]
        }
        Suite::WindowT => {
            let val = |t: usize| m(&format!("t{t}"));
            let has = |t: usize| windows.contains(&t);
            if !(has(3) && has(5) && has(7) && has(9)) {
                return vec![check("diminishing window gains", None)];
            }
            let deltas = val(5).zip(val(3)).zip(val(9).zip(val(7))).map(|((a, b), (c, d))| (a - b, c - d));
            vec![check(
                "gain 3->5 exceeds gain 7->9, which is at least -0.05 dB",
                deltas.map(|(early, late)| (early > late && late >= -0.05, format!("3->5 {early:+.3} dB, 7->9 {late:+.3} dB"))),
            )]
        }
        Suite::AlignmentPairing => {
            let all: Option<Vec<f64>> = ["faam_faam", "fdam_fdam", "faam_fdam"].iter().map(|n| m(n)).collect();
            vec![check(
                "faam_fdam is highest",
                all.map(|v| (v[2] > v[0] && v[2] > v[1], format!("{:.3} vs {:.3} / {:.3} dB", v[2], v[0], v[1]))),
            )]
        }
    }
}

/// Inputs shared by every arm of a suite.
pub struct AblationContext<'a> {
    pub data: &'a Dataset,
    pub priors: &'a Priors,
    pub train: &'a TrainConfig,
    pub inference: &'a InferenceConfig,
    pub cache: &'a RunCache,
    pub run_id: &'a str,
}

fn run_arm_seed(ctx: &AblationContext, plan: Plan, seed: u64) -> Result<Vec<Frame>> {
    let AblationContext { data, priors, cache, .. } = *ctx;
    let base = TrainConfig { seed, ..*ctx.train };
    match plan {
        Plan::Prior => prior_estimates(data, priors),
        Plan::Stage1 { window, skip, input } => {
            let cfg = TrainConfig { window, stage1_skip: skip, stage1_input: input, ..base };
            let s1 = cache.train(&cfg, Stage::One, data, priors, None)?;
            stage1_estimates(&s1.state, data, priors, ctx.inference.batch)
        }
        Plan::Pipeline { window, stage1, stage2 } => {
            let s1 = match stage1 {
                Some(skip) => {
                    let cfg = TrainConfig { window, stage1_skip: skip, stage1_input: InputKind::Joint, ..base };
                    Some(cache.train(&cfg, Stage::One, data, priors, None)?)
                }
                None => None,
            };
            let cfg = TrainConfig { window, stage2_skip: stage2, stage2_alone: s1.is_none(), ..base };
            let s2 = cache.train(&cfg, Stage::Two, data, priors, s1.as_ref())?;
            let inf = InferenceConfig { window: Some(window), ..*ctx.inference };
            pipeline_estimates(&s2.state, data, priors, &inf)
        }
    }
}

/// Trains and evaluates every arm of the suite over all seeds and writes
/// `results.csv`, `results.json` and `plots/*.png` under `report_dir`.
/// An arm whose training or evaluation fails is reported as failed; the
/// remaining arms still run.
pub fn run_ablation(cfg: &AblationConfig, ctx: &AblationContext, report_dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    ctx.train.validate()?;
    let clean = validation_targets(ctx.data)?;
    let arms = suite_arms(cfg.suite, ctx.train, &cfg.windows);
    let mut results = Vec::with_capacity(arms.len());
    for (i, a) in arms.iter().enumerate() {
        let config = serde_json::json!({ "plan": a.plan, "training": ctx.train, "inference": ctx.inference });
        let mut records = Vec::new();
        let mut status = ArmStatus::Ok;
        for &seed in &cfg.seeds {
            log::info!("suite {} arm {} seed {seed}", cfg.suite.name(), a.name);
            match run_arm_seed(ctx, a.plan, seed).and_then(|est| score(&est, &clean)) {
                Ok((p, s)) => records.push(MetricsRecord {
                    run_id: ctx.run_id.into(),
                    arm: a.name.clone(),
                    seed,
                    psnr: mean(&p),
                    ssim: mean(&s),
                    per_frame_psnr: p,
                    per_frame_ssim: s,
                    config: config.clone(),
                }),
                Err(e) => {
                    log::warn!("arm {} seed {seed} failed: {e}", a.name);
                    status = ArmStatus::Failed { reason: format!("seed {seed}: {e}") };
                    break;
                }
            }
        }
        let ok = status == ArmStatus::Ok;
        let avg = |f: fn(&MetricsRecord) -> f64| ok.then(|| records.iter().map(f).sum::<f64>() / records.len() as f64);
        results.push(ArmResult {
            name: a.name.clone(),
            plan: a.plan,
            mean_psnr: avg(|r| r.psnr),
            mean_ssim: avg(|r| r.ssim),
            status,
            records,
            color: plot::color_hex(i),
        });
    }
    let checks = trend_checks(cfg.suite, &results, &cfg.windows);
    let report = AblationReport {
        suite: cfg.suite,
        run_id: ctx.run_id.into(),
        arms: results,
        checks,
        config: serde_json::json!({ "ablate": cfg, "training": ctx.train, "inference": ctx.inference }),
    };
    write_report(&report, report_dir)?;
    Ok(report)
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

pub fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let csv_path = dir.join("results.csv");
    let err = |e: csv::Error| Error::format(&csv_path, e.to_string());
    let mut w = csv::Writer::from_path(&csv_path).map_err(err)?;
    w.write_record(["arm", "seed", "psnr", "ssim", "status"]).map_err(err)?;
    for a in &report.arms {
        let status = match &a.status {
            ArmStatus::Ok => "ok".to_string(),
            ArmStatus::Failed { reason } => format!("FAILED: {reason}"),
        };
        for r in &a.records {
            w.write_record([a.name.clone(), r.seed.to_string(), fmt_db(r.psnr), format!("{:.6}", r.ssim), "ok".into()])
                .map_err(err)?;
        }
        let (p, s) = match (a.mean_psnr, a.mean_ssim) {
            (Some(p), Some(s)) => (fmt_db(p), format!("{s:.6}")),
            _ => (String::new(), String::new()),
        };
        w.write_record([a.name.clone(), "mean".into(), p, s, status]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join("results.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    plot::bar_chart(&report.arms.iter().map(|a| a.mean_psnr).collect::<Vec<_>>(), &plots.join("psnr_bar.png"))?;
    plot::bar_chart(&report.arms.iter().map(|a| a.mean_ssim).collect::<Vec<_>>(), &plots.join("ssim_bar.png"))?;
    let curves: Vec<Vec<f64>> = report
        .arms
        .iter()
        .map(|a| {
            let n = a.records.first().map_or(0, |r| r.per_frame_psnr.len());
            (0..n).map(|k| mean(&a.records.iter().map(|r| r.per_frame_psnr[k]).collect::<Vec<_>>())).collect()
        })
        .collect();
    plot::line_chart(&curves, &plots.join("per_frame_psnr.png"))
}
