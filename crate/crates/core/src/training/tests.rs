use super::*;
use crate::noise::NoiseModel;
use crate::priors::denoiser::{Denoiser, GaussianSmoother};
use crate::priors::flow_est::FlowEstimator;
use crate::synth::dataset::DatasetSpec;
use crate::synth::scene::SceneSpec;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        iters: 4,
        batch: 2,
        patch: 16,
        window: 3,
        val_every: 2,
        val_frames: 2,
        model: ModelConfig { width: 4, levels: 2, align: AlignConfig { groups: 2, reduction: 2, ..Default::default() } },
        ..TrainConfig::default()
    }
}

fn tiny_data(sigma: f64, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        scene: SceneSpec { height: 16, width: 16, length: 5, patch: 16, sprite_radius: [3.0, 5.0], ..SceneSpec::default() },
        train_clips: 2,
        val_clips: 1,
        ..DatasetSpec::default()
    };
    Dataset::synthetic(&spec, &NoiseModel::awgn(sigma), seed).unwrap()
}

fn priors() -> Priors {
    Priors { denoiser: Denoiser::Classical(GaussianSmoother::new(1.0).unwrap()), flow: FlowEstimator::GroundTruth }
}

fn identity_priors() -> Priors {
    Priors { denoiser: Denoiser::Identity, flow: FlowEstimator::GroundTruth }
}

#[test]
fn cosine_schedule_formula() {
    assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
    assert!((cosine_lr(3e-4, 50, 100) - 1.5e-4).abs() < 1e-18);
    assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-18);
    let lrs: Vec<f64> = (0..=100).map(|k| cosine_lr(1.0, k, 100)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn losses_match_brute_force_sums() {
    let a: Vec<f32> = vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75];
    let b: Vec<f32> = vec![0.25, 1.0, -2.0, 0.5, 3.0, 0.75];
    let mut l1 = 0.0f64;
    let mut l2 = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        l1 += d.abs();
        l2 += d * d;
    }
    l1 /= a.len() as f64;
    l2 /= a.len() as f64;
    for (loss, want) in [(Loss::L1, l1), (Loss::L2, l2)] {
        let mut g = Graph::<f64>::new();
        let pa = g.input(Tensor::from_vec([1, 1, 2, 3], a.iter().map(|&v| v as f64).collect()));
        let pb = g.input(Tensor::from_vec([1, 1, 2, 3], b.iter().map(|&v| v as f64).collect()));
        let v = loss.apply(&mut g, pa, pb);
        assert!((g.value(v).item() - want).abs() < 1e-15);
        let fa = Frame::new(1, 2, 3, a.clone()).unwrap();
        let fb = Frame::new(1, 2, 3, b.clone()).unwrap();
        assert!((frame_loss(loss, &fa, &fb).unwrap() - want).abs() < 1e-15);
    }
}

fn first_window(data: &Dataset, t: usize, window: usize) -> TemporalWindow {
    data.train[0].window(t, window).unwrap().0
}

#[test]
fn zero_prediction_loss_is_mean_abs_target() {
    let data = tiny_data(0.1, 1);
    let cfg = tiny_cfg();
    let mut tr = Trainer::new(&cfg, Stage::One, 3).unwrap();
    tr.state.params.zero_all();
    let items = stage1_batch(&[first_window(&data, 2, 3)], &priors(), InputKind::Joint).unwrap();
    let r = items[0].target.as_ref().unwrap();
    let want = r.data().iter().map(|v| v.abs() as f64).sum::<f64>() / r.data().len() as f64;
    let got = tr.step(&items, None).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    // Oracle injection: the target itself as prediction.
    let mut g = Graph::<f32>::new();
    let t = g.input(r.to_tensor());
    let t2 = g.input(r.to_tensor());
    let l = Loss::L1.apply(&mut g, t, t2);
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn stage1_never_reads_the_centre_for_inputs() {
    let data = tiny_data(0.1, 2);
    let w = first_window(&data, 2, 5);
    let mut poisoned = w.clone();
    let c = poisoned.center();
    poisoned.frames[c] = poisoned.frames[c].map(|_| f32::NAN);
    let p = priors();
    let a = stage1_batch(&[w], &p, InputKind::Joint).unwrap();
    let b = stage1_batch(&[poisoned], &p, InputKind::Joint).unwrap();
    assert_eq!(a[0].neighbors, b[0].neighbors);
    assert_eq!(a[0].flows, b[0].flows);
    assert!(a[0].center.is_none() && b[0].center.is_none());
    assert!(b[0].neighbors.iter().all(|f| f.data().iter().all(|v| v.is_finite())));
    assert!(b[0].target.as_ref().unwrap().data().iter().all(|v| v.is_nan()));
}

#[test]
fn static_noiseless_clip_drives_predictions_to_zero() {
    let mut spec = DatasetSpec {
        scene: SceneSpec {
            height: 16,
            width: 16,
            length: 5,
            patch: 16,
            velocity: [0.0, 0.0],
            background_velocity: 0.0,
            ..SceneSpec::default()
        },
        train_clips: 1,
        val_clips: 1,
        ..DatasetSpec::default()
    };
    spec.scene.sprite_radius = [3.0, 5.0];
    let data = Dataset::synthetic(&spec, &NoiseModel::awgn(0.0), 3).unwrap();
    let p = identity_priors();
    let mut cfg = tiny_cfg();
    cfg.iters = 100;
    cfg.lr = 1e-3;
    let mut tr = Trainer::new(&cfg, Stage::One, 3).unwrap();
    let items = stage1_batch(&[first_window(&data, 2, 3), first_window(&data, 3, 3)], &p, InputKind::Joint).unwrap();
    assert!(items.iter().all(|s| s.target.as_ref().unwrap().data().iter().all(|&v| v == 0.0)));
    let mean_abs = |tr: &Trainer| {
        let out = predict_frames(&tr.state, &items).unwrap();
        out.iter().flat_map(|f| f.data().iter()).map(|v| v.abs() as f64).sum::<f64>()
    };
    let before = mean_abs(&tr);
    let losses: Vec<f64> = (0..100).map(|_| tr.step(&items, None).unwrap()).collect();
    let after = mean_abs(&tr);
    assert!(after < before, "{after} vs {before}");
    let head: f64 = losses[..10].iter().sum();
    let tail: f64 = losses[90..].iter().sum();
    assert!(tail < head, "loss did not trend down: {head} -> {tail}");
}

#[test]
fn zero_stage1_anchor_is_the_baseline() {
    let data = tiny_data(0.1, 4);
    let cfg = tiny_cfg();
    let mut tr = Trainer::new(&cfg, Stage::One, 3).unwrap();
    let items = stage1_batch(&[first_window(&data, 1, 3)], &priors(), InputKind::Joint).unwrap();
    tr.state.params.zero_all();
    let a = compute_anchors(&tr.state, "zero", &items).unwrap();
    assert_eq!(&a[0].frame, items[0].base.as_ref().unwrap());

    let tr = Trainer::new(&cfg, Stage::One, 3).unwrap();
    let a = compute_anchors(&tr.state, "init", &items).unwrap();
    let raw = predict_frames(&tr.state, &items).unwrap();
    let diff = a[0].frame.sub(items[0].base.as_ref().unwrap()).unwrap();
    let dev = diff.data().iter().zip(raw[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(dev <= 1e-6, "{dev}");
    assert!(raw[0].data().iter().any(|&v| v != 0.0));
}

#[test]
fn recorruption_is_local_and_checked() {
    let data = tiny_data(0.1, 5);
    let w = first_window(&data, 2, 5);
    let pre = preprocess(&w, &priors()).unwrap();
    let c = w.center();
    let anchor = AnchorFrame::new(&pre.baselines[c], &Frame::zeros(3, 16, 16), "x", &w.key()).unwrap();
    let (w2, n) = recorrupt_window(&w, &anchor, &NoiseModel::awgn(0.1), 9).unwrap();
    for i in w.neighbor_slots() {
        assert_eq!(w2.frames[i], w.frames[i]);
    }
    assert_eq!(w2.frames[c].sub(&anchor.frame).unwrap(), n);
    let (w0, n0) = recorrupt_window(&w, &anchor, &NoiseModel::awgn(0.0), 9).unwrap();
    assert_eq!(w0.frames[c], anchor.frame);
    assert!(n0.data().iter().all(|&v| v == 0.0));
    let other = AnchorFrame { window_key: "elsewhere".into(), ..anchor };
    assert!(matches!(recorrupt_window(&w, &other, &NoiseModel::awgn(0.1), 9), Err(Error::Provenance(_))));
}

#[test]
fn recorruption_noise_matches_the_model_moments() {
    let data = tiny_data(0.1, 6);
    let model = NoiseModel::awgn(0.07);
    let (mut s1, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
    for k in 0..40 {
        let w = first_window(&data, k % 5, 3);
        let pre = preprocess(&w, &priors()).unwrap();
        let anchor = AnchorFrame::new(&pre.baselines[1], &Frame::zeros(3, 16, 16), "x", &w.key()).unwrap();
        let (_, e) = recorrupt_window(&w, &anchor, &model, 100 + k as u64).unwrap();
        for &v in e.data() {
            s1 += v as f64;
            s2 += (v as f64).powi(2);
            n += 1;
        }
    }
    let mean = s1 / n as f64;
    let var = s2 / n as f64 - mean * mean;
    // n = 30720: the mean has std 0.07/sqrt(n) ~ 4e-4, the variance ~ 0.8%.
    assert!(mean.abs() < 2e-3, "{mean}");
    assert!((var / 0.0049 - 1.0).abs() < 0.04, "{var}");
}

#[test]
fn identity_prior_target_is_negated_noise() {
    let data = tiny_data(0.1, 7);
    let p = identity_priors();
    for k in 0..5 {
        let w = first_window(&data, k, 3);
        let pre = preprocess(&w, &p).unwrap();
        let anchor = AnchorFrame::new(&pre.baselines[1], &Frame::filled(3, 16, 16, 0.01), "x", &w.key()).unwrap();
        let (inputs, n) = recorrupted_inputs(&w, &pre, &anchor, &NoiseModel::awgn(0.1), &p, k as u64).unwrap();
        let neg = n.map(|v| -v);
        assert_eq!(inputs.target.unwrap(), neg);
        // Neighbour inputs equal the stage-1 ones.
        assert_eq!(inputs.neighbors, blind_inputs(&pre, InputKind::Joint).unwrap().neighbors);
    }
}

#[test]
fn divergence_dumps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(0.1, 8);
    let mut tr = Trainer::new(&tiny_cfg(), Stage::One, 3).unwrap();
    let mut items = stage1_batch(&[first_window(&data, 1, 3)], &priors(), InputKind::Joint).unwrap();
    items[0].target = Some(items[0].target.as_ref().unwrap().map(|_| f32::NAN));
    match tr.step(&items, Some(dir.path())) {
        Err(Error::Divergence { iteration: 0, dump }) => assert!(dump.exists()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn stage2_needs_stage1_and_keeps_it_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(0.1, 9);
    let p = priors();
    let cfg = tiny_cfg();
    match run_training(&cfg, Stage::Two, &data, &p, None, dir.path()) {
        Err(Error::MissingDependency { key, .. }) => assert_eq!(key, "training.stage1_ckpt"),
        other => panic!("{other:?}"),
    }
    let s1 = run_training(&cfg, Stage::One, &data, &p, None, &dir.path().join("s1")).unwrap();
    let before = s1.state.params.checksum();
    let r = Stage1Ref { state: &s1.state, id: s1.digest.clone() };
    let s2 = run_training(&cfg, Stage::Two, &data, &p, Some(&r), &dir.path().join("s2")).unwrap();
    assert_eq!(s1.state.params.checksum(), before);
    assert_eq!(s2.state.arch.mode, Mode::Nonblind);
    assert_eq!(s2.log.len(), cfg.iters + 1);
    let ck = crate::checkpoint::load(&s2.checkpoint).unwrap();
    assert_eq!(ck.meta["iteration"], 4);
    assert!(ck.groups.contains_key("adam_m") && ck.groups.contains_key("adam_v"));
    assert_eq!(ck.meta["info"]["stage1_checkpoint"], s1.digest);
    let csv = std::fs::read_to_string(dir.path().join("s2/train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), cfg.iters + 2);

    let alone = TrainConfig { stage2_alone: true, ..cfg };
    run_training(&alone, Stage::Two, &data, &p, None, &dir.path().join("alone")).unwrap();
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(0.1, 10);
    let cfg = tiny_cfg();
    let a = run_training(&cfg, Stage::One, &data, &priors(), None, &dir.path().join("a")).unwrap();
    let b = run_training(&cfg, Stage::One, &data, &priors(), None, &dir.path().join("b")).unwrap();
    assert_eq!(a.digest, b.digest);
    let c = run_training(&TrainConfig { seed: 1, ..cfg }, Stage::One, &data, &priors(), None, &dir.path().join("c")).unwrap();
    assert_ne!(a.digest, c.digest);
}

/// Wall-clock cost of one desk-scale step; run with `--ignored --nocapture`.
#[test]
#[ignore]
fn desk_step_timing() {
    let spec = DatasetSpec { train_clips: 2, val_clips: 1, ..DatasetSpec::default() };
    let data = Dataset::synthetic(&spec, &NoiseModel::awgn(0.1), 1).unwrap();
    let p = priors();
    let only = std::env::var("F2R_ONLY").ok();
    for (stage, skip) in [(Stage::One, SkipKind::Faam), (Stage::Two, SkipKind::Fdam)] {
        if only.as_deref().is_some_and(|o| o != format!("{stage:?}")) {
            continue;
        }
        let mut cfg = TrainConfig { stage1_skip: skip, stage2_skip: skip, stage2_alone: true, ..TrainConfig::default() };
        let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<usize>().ok());
        cfg.model.align.groups = env("F2R_GROUPS").unwrap_or(cfg.model.align.groups);
        cfg.patch = env("F2R_PATCH").unwrap_or(cfg.patch);
        cfg.model.width = env("F2R_WIDTH").unwrap_or(cfg.model.width);
        let mut tr = Trainer::new(&cfg, stage, 3).unwrap();
        let samples: Vec<_> = (0..4).map(|b| data.sample(1, b, 5, cfg.patch).unwrap()).collect();
        let t0 = std::time::Instant::now();
        let items = match stage {
            Stage::One => stage1_batch(&samples.iter().map(|s| s.0.clone()).collect::<Vec<_>>(), &p, InputKind::Joint).unwrap(),
            Stage::Two => stage2_batch(&samples, &p, &data.noise, None).unwrap(),
        };
        let prep = t0.elapsed();
        let t1 = std::time::Instant::now();
        for _ in 0..3 {
            tr.step(&items, None).unwrap();
        }
        println!("{stage:?}: prep {prep:?}, step {:?}", t1.elapsed() / 3);
    }
}
