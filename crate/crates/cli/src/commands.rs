//! Subcommand implementations. Every artifact goes under the run directory
//! `<output_root>/<run_id>/`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use f2r_core::backbone::{Mode, ModelState};
use f2r_core::checkpoint::Checkpoint;
use f2r_core::config::{DenoiserKind, RunConfig, SplitChoice};
use f2r_core::evaluation::ablation::{prior_estimates, score, stage1_estimates, validation_targets};
use f2r_core::evaluation::{blindness_audit, run_ablation, AblationContext, MetricsRecord, RunCache};
use f2r_core::inference::{denoise_video, load_refiner};
use f2r_core::noise::NoiseModel;
use f2r_core::priors::{train_learned_denoiser, Denoiser, GaussianSmoother, LearnedDenoiser, Priors};
use f2r_core::rng::{derive_seed, label_key};
use f2r_core::synth::dataset::{Clip, Dataset};
use f2r_core::synth::io::write_clip_dir;
use f2r_core::training::{run_training, Stage, Stage1Ref};
use f2r_core::video::Frame;
use f2r_core::Error;

use crate::runlog::RunLogger;

pub struct Ctx {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub log: &'static RunLogger,
}

fn missing(key: &str, path: &Path, hint: &str) -> Error {
    Error::MissingDependency { key: key.into(), detail: format!("{} not found; {hint}", path.display()) }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if !dir.join(f2r_core::synth::dataset::MANIFEST).exists() {
        return Err(missing("data.dir", &dir, "run gen-data first").into());
    }
    Ok(Dataset::load(&dir)?)
}

fn build_priors(cfg: &RunConfig, noise: &NoiseModel) -> Result<Priors> {
    let denoiser = match cfg.priors.denoiser {
        DenoiserKind::Identity => Denoiser::Identity,
        DenoiserKind::Classical => Denoiser::Classical(match cfg.priors.sigma_k {
            Some(s) => GaussianSmoother::new(s)?,
            None => GaussianSmoother::tuned_for(noise)?,
        }),
        DenoiserKind::Learned => {
            let p = cfg.prior_checkpoint();
            if !p.exists() {
                return Err(missing("priors.checkpoint", &p, "run train-prior first").into());
            }
            Denoiser::Learned(LearnedDenoiser::load(&p)?)
        }
    };
    Ok(Priors { denoiser, flow: cfg.priors.flow })
}

/// The stored prior checksum of a trained checkpoint must match the priors
/// in use.
fn check_priors(ck: &Checkpoint, path: &Path, priors: &Priors) -> Result<()> {
    let stored = ck.meta.pointer("/info/priors_checksum").and_then(|v| v.as_str()).unwrap_or_default();
    if stored != priors.checksum() {
        return Err(Error::Config(format!(
            "{} was trained with different priors ({}); the current configuration uses {}",
            path.display(),
            ck.meta.pointer("/info/priors").and_then(|v| v.as_str()).unwrap_or("unknown"),
            priors.tag()
        ))
        .into());
    }
    Ok(())
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = Dataset::synthetic(&cfg.data.spec(), &cfg.noise, cfg.seed)?;
    let dir = cfg.data_dir();
    data.save(&dir)?;
    log::info!("wrote {} train + {} val clips to {} (digest {})", data.train.len(), data.val.len(), dir.display(), data.digest);
    ctx.log.event("dataset", json!({ "dir": dir, "digest": data.digest }));
    Ok(())
}

pub fn train_prior(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let dir = ctx.run_dir.join("prior");
    fs::create_dir_all(&dir)?;
    match cfg.priors.denoiser {
        DenoiserKind::Learned => {
            let (model, report) = train_learned_denoiser(&cfg.priors.learned, &cfg.data.spec(), &cfg.noise, cfg.seed)?;
            let path = cfg.prior_checkpoint();
            if let Some(p) = path.parent() {
                fs::create_dir_all(p)?;
            }
            let digest = model.save(&path, &report)?;
            log::info!(
                "learned denoiser: {:.3} dB noisy -> {:.3} dB denoised; saved {}",
                report.val_psnr_noisy,
                report.val_psnr_denoised,
                path.display()
            );
            write_json(
                &dir.join("report.json"),
                &json!({
                    "checkpoint": path,
                    "digest": digest,
                    "val_psnr_noisy": report.val_psnr_noisy,
                    "val_psnr_denoised": report.val_psnr_denoised,
                    "final_loss": report.losses.last(),
                }),
            )?;
        }
        _ => {
            let priors = build_priors(cfg, &cfg.noise)?;
            log::info!("{} needs no training", priors.tag());
            write_json(&dir.join("prior.json"), &json!({ "denoiser": priors.tag(), "checksum": priors.checksum() }))?;
        }
    }
    Ok(())
}

pub fn train_stage(ctx: &Ctx, stage: Stage) -> Result<()> {
    let cfg = &ctx.cfg;
    let tc = cfg.train_config();
    let stage1 = if stage == Stage::Two && !tc.stage2_alone {
        let p = cfg.stage1_checkpoint();
        if !p.exists() {
            return Err(missing("training.stage1_ckpt", &p, "train stage 1 first or set training.stage1_ckpt").into());
        }
        Some((p.clone(), ModelState::load(&p)?))
    } else {
        None
    };
    let data = load_dataset(cfg)?;
    let priors = build_priors(cfg, &data.noise)?;
    if let Some((p, (_, ck))) = &stage1 {
        check_priors(ck, p, &priors)?;
    }
    let s1 = stage1.as_ref().map(|(_, (state, ck))| Stage1Ref { state, id: ck.digest.clone() });
    let name = match stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    };
    let out = run_training(&tc, stage, &data, &priors, s1.as_ref(), &ctx.run_dir.join(name))?;
    if let (Some(a), Some(b)) = (out.first_val(), out.last_val()) {
        log::info!(
            "{name}: validation PSNR {:.3} -> {:.3} dB; saved {}",
            a.val_psnr.unwrap_or(f64::NAN),
            b.val_psnr.unwrap_or(f64::NAN),
            out.checkpoint.display()
        );
    }
    ctx.log.event("checkpoint", json!({ "stage": name, "path": out.checkpoint, "digest": out.digest }));
    Ok(())
}

fn frame_digest(f: &Frame) -> String {
    let mut h = Sha256::new();
    f.data().iter().for_each(|v| h.update(v.to_le_bytes()));
    hex::encode(h.finalize())
}

fn split_clips<'a>(data: &'a Dataset, split: &SplitChoice) -> Vec<&'a Clip> {
    match split {
        SplitChoice::Train => data.train.iter().collect(),
        SplitChoice::Val => data.val.iter().collect(),
        SplitChoice::All => data.train.iter().chain(&data.val).collect(),
    }
}

fn load_checked_refiner(cfg: &RunConfig, priors: &Priors) -> Result<(ModelState, String, PathBuf)> {
    let p = cfg.refiner_checkpoint();
    if !p.exists() {
        return Err(missing("inference.checkpoint", &p, "run train-stage2 first").into());
    }
    let (state, digest) = load_refiner(&p)?;
    check_priors(&f2r_core::checkpoint::load(&p)?, &p, priors)?;
    Ok((state, digest, p))
}

pub fn infer(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = load_dataset(cfg)?;
    let priors = build_priors(cfg, &data.noise)?;
    let (state, digest, path) = load_checked_refiner(cfg, &priors)?;
    let inf = cfg.inference.config();
    let out_dir = ctx.run_dir.join("infer");
    let mut clips = Vec::new();
    for clip in split_clips(&data, &cfg.inference.split) {
        let out = denoise_video(&state, &clip.noisy, clip.gt.as_ref(), &priors, &inf)?;
        write_clip_dir(&out, &out_dir.join(clip.id()))?;
        let metrics = match &clip.clean {
            Some(c) => Some(score(out.frames(), c.frames())?),
            None => None,
        };
        let frames: Vec<_> = out
            .frames()
            .iter()
            .enumerate()
            .map(|(k, f)| {
                json!({
                    "index": k,
                    "sha256_f32": frame_digest(f),
                    "psnr": metrics.as_ref().map(|m| m.0[k]),
                    "ssim": metrics.as_ref().map(|m| m.1[k]),
                })
            })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        if let Some((p, s)) = &metrics {
            log::info!("{}: PSNR {:.3} dB, SSIM {:.4}", clip.id(), mean(p), mean(s));
        }
        clips.push(json!({
            "id": clip.id(),
            "frames": frames,
            "psnr": metrics.as_ref().map(|m| mean(&m.0)),
            "ssim": metrics.as_ref().map(|m| mean(&m.1)),
        }));
    }
    write_json(&out_dir.join("outputs.json"), &json!({ "refiner": path, "refiner_digest": digest, "clips": clips }))?;
    log::info!("wrote denoised frames under {}", out_dir.display());
    Ok(())
}

pub fn eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = load_dataset(cfg)?;
    let priors = build_priors(cfg, &data.noise)?;
    let clean = validation_targets(&data)?;
    let mut methods: Vec<(&str, Vec<Frame>)> = vec![("d_only", prior_estimates(&data, &priors)?)];
    let s1 = cfg.stage1_checkpoint();
    if s1.exists() {
        let (state, ck) = ModelState::load(&s1)?;
        check_priors(&ck, &s1, &priors)?;
        methods.push(("stage1", stage1_estimates(&state, &data, &priors, cfg.inference.batch)?));
    } else {
        log::warn!("no stage-1 checkpoint at {}; skipping", s1.display());
    }
    if cfg.refiner_checkpoint().exists() {
        let (state, _, _) = load_checked_refiner(cfg, &priors)?;
        let inf = cfg.inference.config();
        let mut out = Vec::new();
        for clip in &data.val {
            out.extend(denoise_video(&state, &clip.noisy, clip.gt.as_ref(), &priors, &inf)?.into_frames());
        }
        methods.push(("full", out));
    } else {
        log::warn!("no refiner checkpoint at {}; skipping", cfg.refiner_checkpoint().display());
    }
    let dir = ctx.run_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let mut records = Vec::new();
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["method", "frame", "psnr", "ssim"])?;
    for (name, est) in methods {
        let (p, s) = score(&est, &clean)?;
        let rec = MetricsRecord {
            run_id: cfg.run_id.clone(),
            arm: name.into(),
            seed: cfg.training.seed,
            psnr: p.iter().sum::<f64>() / p.len() as f64,
            ssim: s.iter().sum::<f64>() / s.len() as f64,
            per_frame_psnr: p,
            per_frame_ssim: s,
            config: serde_json::to_value(cfg)?,
        };
        for k in 0..rec.per_frame_psnr.len() {
            w.write_record([
                name.to_string(),
                k.to_string(),
                format!("{:.4}", rec.per_frame_psnr[k]),
                format!("{:.6}", rec.per_frame_ssim[k]),
            ])?;
        }
        w.write_record([name.to_string(), "mean".into(), format!("{:.4}", rec.psnr), format!("{:.6}", rec.ssim)])?;
        println!("{name:>8}: PSNR {:.3} dB  SSIM {:.4}", rec.psnr, rec.ssim);
        records.push(rec);
    }
    w.flush()?;
    write_json(&dir.join("metrics.json"), &records)
}

pub fn ablate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = load_dataset(cfg)?;
    let priors = build_priors(cfg, &data.noise)?;
    let train = cfg.train_config();
    let inference = cfg.inference.config();
    let cache = RunCache::new(cfg.cache_dir());
    let actx = AblationContext {
        data: &data,
        priors: &priors,
        train: &train,
        inference: &inference,
        cache: &cache,
        run_id: &cfg.run_id,
    };
    let dir = ctx.run_dir.join("report").join(cfg.ablate.suite.name());
    let report = run_ablation(&cfg.ablate, &actx, &dir)?;
    for a in &report.arms {
        match a.mean_psnr {
            Some(p) => println!("{:>14}: PSNR {p:.3} dB  SSIM {:.4}", a.name, a.mean_ssim.unwrap_or(f64::NAN)),
            None => println!("{:>14}: FAILED", a.name),
        }
    }
    for c in &report.checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    ctx.log.event("report", json!({ "dir": dir, "passed": report.passed() }));
    Ok(())
}

pub fn audit(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = load_dataset(cfg)?;
    let priors = build_priors(cfg, &data.noise)?;
    let tc = cfg.train_config();
    let clip = data.val.first().or(data.train.first()).context("the dataset holds no clips")?;
    let channels = clip.noisy.dims().0;
    let trials = cfg.evaluation.audit_trials;
    let mut results = Vec::new();
    let mut record = |name: String, passed: bool, detail: String| {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        results.push(json!({ "check": name, "passed": passed, "detail": detail }));
    };

    let mut states: Vec<(String, ModelState)> = (0..3u64)
        .map(|k| {
            let seed = derive_seed(&[tc.seed, label_key("audit"), k]);
            ModelState::init(tc.arch(Stage::One, channels), seed).map(|s| (format!("random stage-1 state {k}"), s))
        })
        .collect::<Result<_, _>>()?;
    let s1_path = cfg.stage1_checkpoint();
    let stage1 = if s1_path.exists() {
        let (state, ck) = ModelState::load(&s1_path)?;
        states.push((format!("trained stage-1 state {}", s1_path.display()), state.clone()));
        Some((state, ck))
    } else {
        log::warn!("no stage-1 checkpoint at {}; auditing random states only", s1_path.display());
        None
    };
    for (k, (name, state)) in states.iter().enumerate() {
        if state.arch.mode != Mode::Blind {
            record(format!("blindness of {name}"), false, "not a blind state".into());
            continue;
        }
        let (window, _) = clip.window(clip.noisy.len() / 2, state.arch.window)?;
        let dev = blindness_audit(state, &window, &priors, trials, derive_seed(&[tc.seed, label_key("audit-noise"), k as u64]))?;
        record(format!("blindness of {name}"), dev == 0.0, format!("max deviation {dev:e} over {trials} centre perturbations"));
    }

    let current = priors.checksum();
    let mut frozen = |name: &str, ck: &Checkpoint| {
        let stored = ck.meta.pointer("/info/priors_checksum").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        record(format!("frozen priors in {name}"), stored == current, format!("recorded {stored:.16}, current {current:.16}"));
    };
    if let Some((_, ck)) = &stage1 {
        frozen("stage 1", ck);
    }
    let s2_path = cfg.refiner_checkpoint();
    let stage2 = if s2_path.exists() { Some(f2r_core::checkpoint::load(&s2_path)?) } else { None };
    if let Some(ck) = &stage2 {
        frozen("stage 2", ck);
    }
    if let (Some((_, ck1)), Some(ck2)) = (&stage1, &stage2) {
        if let Some(id) = ck2.meta.pointer("/info/stage1_checkpoint").and_then(|v| v.as_str()) {
            record(
                "stage-2 anchor provenance".into(),
                id == ck1.digest,
                format!("stage 2 recorded stage-1 digest {id:.16}, current {:.16}", ck1.digest),
            );
        }
    }
    let passed = results.iter().all(|r| r["passed"] == true);
    write_json(&ctx.run_dir.join("audit").join("audit.json"), &json!({ "passed": passed, "checks": results }))?;
    if !passed {
        return Err(Error::Invariant("audit failed".into()).into());
    }
    Ok(())
}
