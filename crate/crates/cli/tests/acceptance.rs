//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 7-9 train at desk scale through the `f2r` binary with
//! `configs/desk.toml`. Trained models are cached under
//! `$F2R_ACCEPTANCE_DIR` (default `<target>/tmp/acceptance`), so only the
//! first run pays for training.
//!
//! The target fails when an exact criterion (1-6, 10) fails or any criterion
//! cannot run. Desk-scale trend criteria (7-9) are reported; they fail the
//! target only with `F2R_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use f2r_core::alignment::{backward_warp, deformable_sample, AlignConfig, Faam, Fdam};
use f2r_core::autograd::conv::conv2d_forward;
use f2r_core::autograd::gradcheck::{check_gradients, check_gradients_with_params};
use f2r_core::autograd::{Graph, ParamStore, Tensor, Var};
use f2r_core::backbone::{Arch, InputKind, Mode, ModelState, SkipKind};
use f2r_core::evaluation::{psnr_frame, ssim_frame};
use f2r_core::flow::FlowField;
use f2r_core::inference::{denoise_video, InferenceConfig};
use f2r_core::noise::NoiseModel;
use f2r_core::priors::{build_flow_pyramid, make_joint_input, Denoiser, FlowEstimator, GaussianSmoother, Priors};
use f2r_core::synth::dataset::{Dataset, DatasetSpec};
use f2r_core::synth::scene::SceneSpec;
use f2r_core::training::prepare::{blind_inputs, preprocess, recorrupt_window, recorrupted_inputs, AnchorFrame};
use f2r_core::video::Frame;

type Outcome = Result<(bool, String), String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn rand_tensor(shape: [usize; 4], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn rand_frame(c: usize, h: usize, w: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

/// Weighted squared norm of `v` against a fixed random probe.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape();
    let w = g.input(rand_tensor(shape, seed, 1.0));
    let prod = g.mul_broadcast(v, w);
    let zero = g.input(Tensor::zeros(shape));
    g.l2_loss(prod, zero)
}

fn uniform_pyramid(g: &mut Graph<f64>, levels: usize, h: usize, w: usize, dx: f32, dy: f32) -> Vec<Var> {
    let field = FlowField::uniform(h, w, dx, dy);
    build_flow_pyramid(&field, levels).unwrap().iter().map(|f| g.input(f.to_tensor())).collect()
}

fn small_priors() -> Priors {
    Priors { denoiser: Denoiser::Classical(GaussianSmoother::new(1.0).unwrap()), flow: FlowEstimator::GroundTruth }
}

fn small_data(seed: u64) -> Dataset {
    let spec = DatasetSpec {
        scene: SceneSpec { height: 16, width: 16, length: 5, patch: 16, sprite_radius: [3.0, 5.0], ..SceneSpec::default() },
        train_clips: 1,
        val_clips: 1,
        ..DatasetSpec::default()
    };
    Dataset::synthetic(&spec, &NoiseModel::awgn(0.1), seed).unwrap()
}

// ---------------------------------------------------------------------------
// Desk-scale runs through the binary.

struct Desk {
    dir: PathBuf,
    config: PathBuf,
}

impl Desk {
    fn new() -> Self {
        let dir = std::env::var_os("F2R_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
        let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        Self { dir, config }
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.join("desk")
    }

    fn f2r(&self, sub: &str, extra: &[String]) -> Result<(), String> {
        let mut args = vec![
            sub.to_string(),
            "--config".into(),
            self.config.display().to_string(),
            "--set".into(),
            format!("output_root={:?}", self.dir.display().to_string()),
        ];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_f2r"))
            .args(&args)
            .stdout(Stdio::null())
            .output()
            .map_err(|e| format!("spawning f2r: {e}"))?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("f2r {} exited with {}: {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr).trim_end()))
        }
    }

    /// Dataset and learned prior, produced once.
    fn prepare(&self) -> Result<(), String> {
        self.f2r("gen-data", &[])?;
        if !self.run_dir().join("prior/denoiser.ckpt").exists() {
            self.f2r("train-prior", &[])?;
        }
        Ok(())
    }

    fn suite(&self, suite: &str) -> Outcome {
        self.prepare()?;
        self.f2r("ablate", &["--set".into(), format!("ablate.suite=\"{suite}\"")])?;
        let path = self.run_dir().join("report").join(suite).join("results.json");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let report: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let means: Vec<String> = report["arms"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|a| match a["mean_psnr"].as_f64() {
                Some(p) => format!("{} {p:.3}", a["name"].as_str().unwrap_or("?")),
                None => format!("{} FAILED", a["name"].as_str().unwrap_or("?")),
            })
            .collect();
        let checks = report["checks"].as_array().cloned().unwrap_or_default();
        let passed = !checks.is_empty() && checks.iter().all(|c| c["passed"] == true);
        let details: Vec<String> = checks
            .iter()
            .map(|c| format!("[{}] {}", if c["passed"] == true { "ok" } else { "no" }, c["detail"].as_str().unwrap_or("")))
            .collect();
        Ok((passed, format!("{}; {}", means.join(", "), details.join("; "))))
    }
}

// ---------------------------------------------------------------------------
// Criteria.

fn structural_blindness(desk: &Desk) -> Outcome {
    desk.prepare()?;
    if !desk.run_dir().join("stage1/model.ckpt").exists() {
        desk.f2r("train-stage1", &[])?;
    }
    desk.f2r("audit", &[]).ok();
    let path = desk.run_dir().join("audit/audit.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let audit: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let checks = audit["checks"].as_array().cloned().unwrap_or_default();
    let blind: Vec<&serde_json::Value> =
        checks.iter().filter(|c| c["check"].as_str().is_some_and(|s| s.starts_with("blindness"))).collect();
    let random = blind.iter().filter(|c| c["check"].as_str().unwrap_or("").contains("random")).count();
    let trained = blind.iter().filter(|c| c["check"].as_str().unwrap_or("").contains("trained")).count();
    let ok = random > 0 && trained > 0 && checks.iter().all(|c| c["passed"] == true);
    let detail: Vec<&str> = blind.iter().filter_map(|c| c["detail"].as_str()).collect();
    Ok((ok, format!("{random} random + {trained} trained stage-1 states: {}", detail.join("; "))))
}

fn kernel_degeneracies() -> Outcome {
    let f = rand_tensor([2, 3, 9, 7], 1, 1.0).cast::<f32>();
    let warp = backward_warp(&f, &Tensor::zeros([2, 2, 9, 7])).map_err(|e| e.to_string())?.max_abs_diff(&f);

    let x = rand_tensor([2, 4, 7, 6], 2, 1.0).cast::<f32>();
    let wt = rand_tensor([5, 4, 3, 3], 3, 0.5).cast::<f32>();
    let b = rand_tensor([1, 5, 1, 1], 4, 0.5).cast::<f32>();
    let zeros = Tensor::zeros([2, 2 * 2 * 9, 7, 6]);
    let deform = deformable_sample(&x, &zeros, &zeros, &wt, Some(&b), 2).map_err(|e| e.to_string())?;
    let conv = deform.max_abs_diff(&conv2d_forward(&x, &wt, Some(&b), 1, 1));

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Fdam::new(&mut store, "fdam", 4, 2, &AlignConfig { groups: 2, ..AlignConfig::default() }, &mut rng)
        .map_err(|e| e.to_string())?;
    randomize(&mut store, 6, 0.5);
    store.get_mut(m.beta).data_mut()[0] = 0.0;
    let store = store.cast::<f32>();
    let mut bitwise = true;
    for seed in 0..5u64 {
        let center = rand_tensor([1, 4, 8, 8], 10 + seed, 1.0).cast::<f32>();
        let mut g = Graph::with_params(&store, false);
        let cv = g.input(center.clone());
        let nv: Vec<Var> = (0..2).map(|i| g.input(rand_tensor([1, 4, 8, 8], 20 + 3 * seed + i, 1.0).cast())).collect();
        let fv: Vec<Var> = (0..2).map(|i| g.input(rand_tensor([1, 2, 8, 8], 40 + 3 * seed + i, 2.0).cast())).collect();
        let out = m.forward(&mut g, cv, &nv, &fv).map_err(|e| e.to_string())?;
        bitwise &= g.value(out) == &center;
    }
    let ok = warp <= 1e-6 && conv <= 1e-5 && bitwise;
    Ok((ok, format!("zero-flow warp {warp:.1e}, zero-offset deform vs conv {conv:.1e}, zero-beta FDAM bitwise {bitwise}")))
}

fn gradient_checks() -> Outcome {
    let mut errs = Vec::new();
    let r = check_gradients(&[rand_tensor([2, 2, 5, 6], 1, 1.0), rand_tensor([2, 2, 5, 6], 2, 1.7)], 1e-4, 60, 3, |g, v| {
        let y = g.warp(v[0], v[1]);
        probe(g, y, 4)
    });
    errs.push(("warp", r.max_rel_error));

    let inputs = [
        rand_tensor([1, 4, 5, 5], 5, 1.0),
        rand_tensor([1, 2 * 2 * 9, 5, 5], 6, 1.3),
        rand_tensor([3, 4, 3, 3], 7, 0.5),
        rand_tensor([1, 3, 1, 1], 8, 0.5),
    ];
    let r = check_gradients(&inputs, 1e-4, 60, 9, |g, v| {
        let y = g.deform_conv(v[0], v[1], v[2], Some(v[3]), 2);
        probe(g, y, 10)
    });
    errs.push(("deformable", r.max_rel_error));

    let (c, n) = (4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let faam = Faam::new(&mut store, "faam", c, n, &AlignConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    randomize(&mut store, 12, 0.6);
    let inputs: Vec<Tensor<f64>> = vec![
        rand_tensor([1, c, 5, 5], 13, 1.0),
        rand_tensor([1, c, 5, 5], 14, 1.0),
        rand_tensor([1, 2, 5, 5], 15, 1.5),
        rand_tensor([1, 2, 5, 5], 16, 1.5),
    ];
    let r = check_gradients_with_params(&store, &inputs, 1e-5, 25, 17, |g, v| {
        let out = faam.forward(g, &v[..2], &v[2..]).unwrap();
        probe(g, out, 18)
    });
    errs.push(("faam", r.max_rel_error));

    let mut store = ParamStore::new();
    let fdam = Fdam::new(&mut store, "fdam", c, n, &AlignConfig { groups: 2, ..AlignConfig::default() }, &mut rng)
        .map_err(|e| e.to_string())?;
    randomize(&mut store, 19, 0.4);
    let inputs: Vec<Tensor<f64>> = vec![
        rand_tensor([1, c, 5, 5], 20, 1.0),
        rand_tensor([1, c, 5, 5], 21, 1.0),
        rand_tensor([1, c, 5, 5], 22, 1.0),
        rand_tensor([1, 2, 5, 5], 23, 1.5),
        rand_tensor([1, 2, 5, 5], 24, 1.5),
    ];
    let r = check_gradients_with_params(&store, &inputs, 1e-5, 25, 25, |g, v| {
        let out = fdam.forward(g, v[0], &v[1..3], &v[3..]).unwrap();
        probe(g, out, 26)
    });
    errs.push(("fdam", r.max_rel_error));

    // Random uniform flows per forward; the pyramid halves them per level.
    for (name, mode, skip) in
        [("blind forward", Mode::Blind, SkipKind::Faam), ("nonblind forward", Mode::Nonblind, SkipKind::Fdam)]
    {
        let arch = Arch {
            mode,
            skip,
            input: InputKind::Joint,
            data_channels: 1,
            width: 2,
            levels: 2,
            window: 3,
            align: AlignConfig { groups: 1, reduction: 1, spatial_kernel: 3, ..AlignConfig::default() },
        };
        let s = ModelState::init(arch, 27).map_err(|e| e.to_string())?;
        let mut p: ParamStore<f64> = s.params.cast();
        randomize(&mut p, 28, 0.5);
        let (h, w) = (4, 6);
        let inputs: Vec<Tensor<f64>> = (0..3).map(|i| rand_tensor([1, 2, h, w], 30 + i, 1.0)).collect();
        let mut worst = 0.0f64;
        for k in 0..4u64 {
            let mut frng = ChaCha8Rng::seed_from_u64(500 + k);
            let flows: Vec<(f32, f32)> = (0..2).map(|_| (frng.gen_range(-1.5..1.5), frng.gen_range(-1.5..1.5))).collect();
            let r = check_gradients_with_params(&p, &inputs, 1e-5, 6, 33 + k, |g, v| {
                let pyr: Vec<Vec<Var>> = flows.iter().map(|&(dx, dy)| uniform_pyramid(g, 2, h, w, dx, dy)).collect();
                let out = match mode {
                    Mode::Blind => s.forward_blind(g, &v[..2], &pyr).unwrap(),
                    Mode::Nonblind => s.forward_nonblind(g, v[2], &v[..2], &pyr).unwrap(),
                };
                probe(g, out, 34)
            });
            worst = worst.max(r.max_rel_error);
        }
        errs.push((name, worst));
    }
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok((worst <= 1e-3, format!("max relative error {worst:.1e} ({})", detail.join(", "))))
}

/// Distance of `x̂ + r` from `y` in ulps at the magnitude of the largest operand.
fn ulps(y: f32, baseline: f32, residual: f32, sum: f32) -> f32 {
    let ulp = f32::EPSILON * y.abs().max(baseline.abs()).max(residual.abs()).max(f32::MIN_POSITIVE);
    (sum - y).abs() / ulp
}

fn algebraic_identities() -> Outcome {
    // x̂ + r = y.
    let mut worst_ulp = 0.0f32;
    for (k, d) in [Denoiser::Identity, Denoiser::Classical(GaussianSmoother::new(1.2).unwrap())].iter().enumerate() {
        for seed in 0..8 {
            let y = rand_frame(3, 17, 13, 100 * k as u64 + seed);
            let j = make_joint_input(&y, d).map_err(|e| e.to_string())?;
            let s = j.source();
            for i in 0..y.data().len() {
                worst_ulp = worst_ulp.max(ulps(y.data()[i], j.baseline.data()[i], j.residual.data()[i], s.data()[i]));
            }
        }
    }

    // Recorruption touches only the centre; identity prior gives r' = -n'.
    let data = small_data(3);
    let clip = &data.train[0];
    let mut neighbours_kept = true;
    let mut negated = true;
    for t in 0..clip.noisy.len() {
        let (w, _) = clip.window(t, 3).map_err(|e| e.to_string())?;
        let pre = preprocess(&w, &small_priors()).map_err(|e| e.to_string())?;
        let c = w.center();
        let anchor = AnchorFrame::new(&pre.baselines[c], &rand_frame(3, 16, 16, t as u64).map(|v| 0.05 * v), "a", &w.key())
            .map_err(|e| e.to_string())?;
        let (w2, _) = recorrupt_window(&w, &anchor, &NoiseModel::awgn(0.1), t as u64).map_err(|e| e.to_string())?;
        neighbours_kept &= w.neighbor_slots().into_iter().all(|i| w2.frames[i] == w.frames[i]);

        let identity = Priors { denoiser: Denoiser::Identity, flow: FlowEstimator::GroundTruth };
        let pre = preprocess(&w, &identity).map_err(|e| e.to_string())?;
        let anchor =
            AnchorFrame::new(&pre.baselines[c], &Frame::filled(3, 16, 16, 0.01), "a", &w.key()).map_err(|e| e.to_string())?;
        let (inputs, n) =
            recorrupted_inputs(&w, &pre, &anchor, &NoiseModel::awgn(0.1), &identity, 50 + t as u64).map_err(|e| e.to_string())?;
        negated &= inputs.target.as_ref() == Some(&n.map(|v| -v));
        negated &= inputs.neighbors == blind_inputs(&pre, InputKind::Joint).map_err(|e| e.to_string())?.neighbors;
    }

    // A zero-parameter refiner returns D(y_t).
    let arch = Arch {
        mode: Mode::Nonblind,
        skip: SkipKind::Fdam,
        input: InputKind::Joint,
        data_channels: 3,
        width: 4,
        levels: 2,
        window: 3,
        align: AlignConfig { groups: 2, reduction: 2, ..AlignConfig::default() },
    };
    let mut state = ModelState::init(arch, 4).map_err(|e| e.to_string())?;
    state.params.zero_all();
    let priors = small_priors();
    let out =
        denoise_video(&state, &clip.noisy, clip.gt.as_ref(), &priors, &InferenceConfig::default()).map_err(|e| e.to_string())?;
    let mut degenerate = true;
    for (k, f) in out.frames().iter().enumerate() {
        degenerate &= f == &priors.denoiser.denoise(clip.noisy.frame(k)).map_err(|e| e.to_string())?;
    }
    let ok = worst_ulp <= 1.0 && neighbours_kept && negated && degenerate;
    Ok((
        ok,
        format!(
            "x̂+r vs y {worst_ulp} ulp, neighbours unchanged {neighbours_kept}, identity-prior target = -n' {negated}, zero refiner = D(y) {degenerate}"
        ),
    ))
}

fn flow_pyramid() -> Outcome {
    let levels = build_flow_pyramid(&FlowField::uniform(64, 64, 8.0, 0.0), 4).map_err(|e| e.to_string())?;
    let mut mags = Vec::new();
    let mut exact = true;
    for (l, f) in levels.iter().enumerate() {
        let want = (8 >> l) as f32;
        exact &= f.height() == 64 >> l && f.dx().iter().all(|&v| v == want) && f.dy().iter().all(|&v| v == 0.0);
        mags.push(f.max_magnitude());
    }
    Ok((exact && mags == [8.0, 4.0, 2.0, 1.0], format!("per-level magnitudes {mags:?}")))
}

/// Mean squared error, directly from the definition.
fn psnr_oracle(a: &Frame, b: &Frame) -> f64 {
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64)).sum::<f64>() / n;
    10.0 * (1.0 / mse).log10()
}

/// SSIM with an explicit 2-D Gaussian window at every valid position.
fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    let (c, h, w) = a.dims();
    let (k, sigma) = (11usize, 1.5f64);
    let r = (k / 2) as f64;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            win[i * k + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let mut acc = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let at = |p: &[f32], i: usize, j: usize| p[(y + i) * w + x + j] as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += win[i * k + j] * at(pa, i, j);
                        mb += win[i * k + j] * at(pb, i, j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (da, db) = (at(pa, i, j) - ma, at(pb, i, j) - mb);
                        va += win[i * k + j] * da * da;
                        vb += win[i * k + j] * db * db;
                        cov += win[i * k + j] * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        sum += acc / ((h - k + 1) * (w - k + 1)) as f64;
    }
    sum / c as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for i in 0..50u64 {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(11..=24), rng.gen_range(11..=24));
        let a = rand_frame(c, h, w, 1000 + i);
        let noise = rng.gen_range(0.01..0.3);
        let b = a.zip_map(&rand_frame(c, h, w, 2000 + i), |x, n| (x + noise as f32 * (n - 0.5)).clamp(0.0, 1.0)).unwrap();
        dp = dp.max((psnr_frame(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        ds = ds.max((ssim_frame(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    let a = Frame::filled(3, 16, 16, 0.5);
    let b = Frame::filled(3, 16, 16, 0.6);
    let p = psnr_frame(&a, &b).unwrap();
    // 0.6f32 - 0.5f32 is not exactly 0.1; the closed form uses the f64 value.
    let ok = dp <= 1e-9 && ds <= 1e-9 && (p - 20.0).abs() < 1e-5;
    Ok((ok, format!("max |psnr - oracle| {dp:.1e}, max |ssim - oracle| {ds:.1e} on 50 pairs, uniform 0.1 difference {p:.6} dB")))
}

fn determinism(desk: &Desk) -> Outcome {
    let root = desk.dir.join("determinism");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let config = root.join("e2e.toml");
    let text = format!(
        r#"run_id = "e2e"
output_root = {root:?}
seed = 5

[data]
train_clips = 2
val_clips = 1

[data.scene]
height = 32
width = 32
length = 6
patch = 32

[priors]
denoiser = "classical"

[model]
width = 8
levels = 3

[model.align]
groups = 4

[training]
iters = 20
batch = 2
patch = 32
window = 5
val_every = 10
val_frames = 2
"#,
        root = root.display().to_string()
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<PathBuf, String> {
        for sub in ["gen-data", "train-stage1", "train-stage2", "infer"] {
            let o = Command::new(env!("CARGO_BIN_EXE_f2r"))
                .args([sub, "--config", config.to_str().unwrap()])
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{sub}: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
        let moved = root.join(tag);
        std::fs::rename(root.join("e2e"), &moved).map_err(|e| e.to_string())?;
        Ok(moved)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut files = Vec::new();
    for sub in ["stage1/model.ckpt", "stage2/model.ckpt"] {
        files.push(PathBuf::from(sub));
    }
    let infer = a.join("infer");
    let mut stack = vec![infer.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p.strip_prefix(&a).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    let frames = files.iter().filter(|f| f.extension().is_some_and(|e| e == "png")).count();
    let mut differing = Vec::new();
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        if x.is_err() || x.ok() != y.ok() {
            differing.push(f.display().to_string());
        }
    }
    let ok = differing.is_empty() && frames > 0;
    Ok((ok, format!("{} files compared (2 checkpoints, {frames} frames, outputs.json); differing: {differing:?}", files.len())))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let desk = Desk::new();
    let criteria: Vec<Criterion> = vec![
        ("structural blindness", Box::new(|| structural_blindness(&desk))),
        ("kernel degeneracies", Box::new(kernel_degeneracies)),
        ("gradient correctness", Box::new(gradient_checks)),
        ("algebraic identities", Box::new(algebraic_identities)),
        ("flow pyramid", Box::new(flow_pyramid)),
        ("metric oracles", Box::new(metric_oracles)),
        ("stages trend", Box::new(|| desk.suite("stages"))),
        ("window_T trend", Box::new(|| desk.suite("window_T"))),
        ("components trend", Box::new(|| desk.suite("components"))),
        ("determinism", Box::new(|| determinism(&desk))),
    ];
    let strict = std::env::var("F2R_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let (mut passed, mut fatal) = (0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = std::time::Instant::now();
        let trend = (7..=9).contains(&(i + 1));
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => {
                fatal += 1;
                (false, format!("error: {e}"))
            }
        };
        passed += usize::from(ok);
        if !ok && (!trend || strict) {
            fatal += 1;
        }
        println!("{} {:>2} {name} ({:.1}s): {detail}", if ok { "PASS" } else { "FAIL" }, i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {passed} of {} criteria passed", criteria.len());
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
