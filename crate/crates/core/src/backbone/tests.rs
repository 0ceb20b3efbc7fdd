use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck::check_gradients_with_params;
use crate::autograd::Tensor;

fn arch(mode: Mode, skip: SkipKind) -> Arch {
    Arch {
        mode,
        skip,
        input: InputKind::Joint,
        data_channels: 1,
        width: 4,
        levels: 3,
        window: 3,
        align: AlignConfig { groups: 2, reduction: 2, ..AlignConfig::default() },
    }
}

fn rand_tensor<T: Real>(shape: [usize; 4], seed: u64, scale: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-scale..scale))).collect())
}

fn randomize<T: Real>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = T::from_f64_lossy(rng.gen_range(-scale..scale)));
    }
}

/// Flow pyramid of a uniform flow: each level halves the displacement.
fn pyramid<T: Real>(g: &mut Graph<T>, levels: usize, b: usize, h: usize, w: usize, dx: f64) -> Vec<Var> {
    (0..levels)
        .map(|l| {
            let s = 1 << l;
            let mut t = Tensor::zeros([b, 2, h / s, w / s]);
            for n in 0..b {
                for y in 0..h / s {
                    for x in 0..w / s {
                        t.set(n, 0, y, x, T::from_f64_lossy(dx / s as f64));
                    }
                }
            }
            g.input(t)
        })
        .collect()
}

struct Run {
    out: Tensor<f32>,
}

fn run(state: &ModelState, frames: &[Tensor<f32>], dx: f64) -> Run {
    let mut g = Graph::with_params(&state.params, false);
    let [b, _, h, w] = frames[0].shape();
    let vars: Vec<Var> = frames.iter().map(|f| g.input(f.clone())).collect();
    let n = state.arch.neighbors();
    let pyr: Vec<Vec<Var>> = (0..n).map(|i| pyramid(&mut g, state.arch.levels, b, h, w, dx * (i as f64 + 1.0))).collect();
    let out = match state.arch.mode {
        Mode::Blind => state.forward_blind(&mut g, &vars[..n], &pyr).unwrap(),
        Mode::Nonblind => state.forward_nonblind(&mut g, vars[n], &vars[..n], &pyr).unwrap(),
    };
    Run { out: g.take_value(out) }
}

fn frames(count: usize, b: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..count).map(|i| rand_tensor([b, 2, 16, 16], seed + i as u64, 1.0)).collect()
}

#[test]
fn level_shapes_follow_the_width_schedule() {
    let mut a = arch(Mode::Blind, SkipKind::Faam);
    a.levels = 4;
    let s = ModelState::init(a, 1).unwrap();
    let mut g = Graph::with_params(&s.params, false);
    let x = g.input(rand_tensor([2, 2, 16, 24], 3, 1.0));
    let feats = s.encode(&mut g, x).unwrap();
    let shapes: Vec<_> = feats.iter().map(|&f| g.value(f).shape()).collect();
    assert_eq!(shapes, vec![[2, 4, 16, 24], [2, 8, 8, 12], [2, 16, 4, 6], [2, 16, 2, 3]]);
    let bad = g.input(rand_tensor([1, 2, 12, 12], 3, 1.0));
    assert!(matches!(s.encode(&mut g, bad), Err(Error::Input(_))));
}

#[test]
fn frames_are_encoded_independently() {
    let s = ModelState::init(arch(Mode::Blind, SkipKind::Faam), 2).unwrap();
    let a = rand_tensor::<f32>([1, 2, 16, 16], 4, 1.0);
    let b = rand_tensor::<f32>([1, 2, 16, 16], 5, 1.0);
    let mut g = Graph::with_params(&s.params, false);
    let (va, vb) = (g.input(a.clone()), g.input(b));
    let pair = s.encode_frames(&mut g, &[va, vb]).unwrap();
    let mut g2 = Graph::with_params(&s.params, false);
    let va2 = g2.input(a);
    let alone = s.encode(&mut g2, va2).unwrap();
    for l in 0..3 {
        assert_eq!(g.value(pair[0][l]), g2.value(alone[l]));
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    for (mode, skip) in [
        (Mode::Blind, SkipKind::Faam),
        (Mode::Nonblind, SkipKind::Fdam),
        (Mode::Blind, SkipKind::Direct),
        (Mode::Blind, SkipKind::Fdam),
        (Mode::Nonblind, SkipKind::Faam),
    ] {
        let mut s = ModelState::init(arch(mode, skip), 3).unwrap();
        s.params.zero_all();
        let r = run(&s, &frames(3, 2, 10), 1.0);
        assert!(r.out.data().iter().all(|&v| v == 0.0), "{mode:?} {skip:?}");
        assert_eq!(r.out.shape(), [2, 1, 16, 16]);
    }
}

#[test]
fn blind_output_depends_on_neighbours() {
    let mut s = ModelState::init(arch(Mode::Blind, SkipKind::Faam), 4).unwrap();
    randomize(&mut s.params, 5, 0.3);
    let f = frames(2, 1, 20);
    let base = run(&s, &f, 0.5).out;
    let mut g = f.clone();
    g[1].data_mut()[40] += 1.0;
    assert!(run(&s, &g, 0.5).out.max_abs_diff(&base) > 0.0);
}

#[test]
fn zero_beta_makes_nonblind_ignore_neighbours() {
    let mut s = ModelState::init(arch(Mode::Nonblind, SkipKind::Fdam), 6).unwrap();
    randomize(&mut s.params, 7, 0.3);
    for b in s.fdam_betas() {
        s.params.get_mut(b).data_mut()[0] = 0.0;
    }
    let f = frames(3, 1, 30);
    let base = run(&s, &f, 1.0).out;
    let mut g = f.clone();
    g[0] = rand_tensor([1, 2, 16, 16], 99, 1.0);
    assert_eq!(run(&s, &g, -2.0).out, base);
    g[2].data_mut()[7] += 1.0;
    assert!(run(&s, &g, 1.0).out.max_abs_diff(&base) > 0.0);
}

#[test]
fn blind_and_nonblind_share_backbone_shapes() {
    let b = ModelState::init(arch(Mode::Blind, SkipKind::Faam), 1).unwrap();
    let n = ModelState::init(arch(Mode::Nonblind, SkipKind::Fdam), 1).unwrap();
    assert_eq!(b.backbone_shapes(), n.backbone_shapes());
    assert!(b.fdam_betas().is_empty());
    assert!(n.faams().is_empty());
    assert_eq!(n.fdam_betas().len(), 3);
    assert!(n.fdam_betas().iter().all(|&id| n.params.get(id).item() == 0.0));
}

#[test]
fn mode_and_arity_are_checked() {
    let b = ModelState::init(arch(Mode::Blind, SkipKind::Faam), 1).unwrap();
    let n = ModelState::init(arch(Mode::Nonblind, SkipKind::Fdam), 1).unwrap();
    let mut g = Graph::with_params(&b.params, false);
    let x = g.input(rand_tensor([1, 2, 16, 16], 1, 1.0));
    let p = pyramid(&mut g, 3, 1, 16, 16, 0.0);
    assert!(matches!(b.forward_nonblind(&mut g, x, &[x, x], &[p.clone(), p.clone()]), Err(Error::Mode(_))));
    assert!(matches!(b.forward_blind(&mut g, &[x], std::slice::from_ref(&p)), Err(Error::Input(_))));
    assert!(matches!(b.forward_blind(&mut g, &[x, x], std::slice::from_ref(&p)), Err(Error::Input(_))));
    let mut g = Graph::with_params(&n.params, false);
    let x = g.input(rand_tensor([1, 2, 16, 16], 1, 1.0));
    let p = pyramid(&mut g, 3, 1, 16, 16, 0.0);
    assert!(matches!(n.forward_blind(&mut g, &[x, x], &[p.clone(), p]), Err(Error::Mode(_))));
    let mut bad = arch(Mode::Nonblind, SkipKind::Fdam);
    bad.align.groups = 3;
    assert!(matches!(ModelState::init(bad, 0), Err(Error::Config(_))));
    bad.align.groups = 2;
    bad.window = 4;
    assert!(ModelState::init(bad, 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let s = ModelState::init(arch(Mode::Nonblind, SkipKind::Fdam), 11).unwrap();
    s.save(&path, &serde_json::json!({"stage": 2})).unwrap();
    let (t, ck) = ModelState::load(&path).unwrap();
    assert_eq!(s, t);
    assert_eq!(ck.meta["info"]["stage"], 2);
    let f = frames(3, 1, 40);
    assert_eq!(run(&s, &f, 1.0).out, run(&t, &f, 1.0).out);
}

#[test]
fn perturbation_stays_within_receptive_radius() {
    // Nonblind FDAM, and blind FAAM with the global channel gate held constant.
    for (mode, skip) in [(Mode::Nonblind, SkipKind::Fdam), (Mode::Blind, SkipKind::Faam)] {
        let mut a = arch(mode, skip);
        a.levels = 2;
        a.align.delta_max = 1.0;
        let mut s = ModelState::init(a, 12).unwrap();
        randomize(&mut s.params, 13, 0.2);
        for f in s.faams() {
            s.params.get_mut(f.ca_excite.0).data_mut().fill(0.0);
            s.params.get_mut(f.ca_excite.1).data_mut().fill(0.0);
        }
        let (h, w) = (96, 96);
        let base: Vec<Tensor<f32>> = (0..3).map(|i| rand_tensor([1, 2, h, w], 50 + i, 1.0)).collect();
        let out = |fr: &[Tensor<f32>]| {
            let mut g = Graph::with_params(&s.params, false);
            let vars: Vec<Var> = fr.iter().map(|f| g.input(f.clone())).collect();
            let pyr: Vec<Vec<Var>> = (0..2).map(|_| pyramid(&mut g, 2, 1, h, w, 1.5)).collect();
            let o = match mode {
                Mode::Blind => s.forward_blind(&mut g, &vars[..2], &pyr).unwrap(),
                Mode::Nonblind => s.forward_nonblind(&mut g, vars[2], &vars[..2], &pyr).unwrap(),
            };
            g.take_value(o)
        };
        let a0 = out(&base);
        let mut pert = base.clone();
        let (py, px) = (48usize, 48usize);
        pert[0].set(0, 0, py, px, 5.0);
        let a1 = out(&pert);
        let r = s.receptive_radius(1.5) as isize;
        let mut changed = 0;
        for y in 0..h {
            for x in 0..w {
                let d = a0.at(0, 0, y, x) != a1.at(0, 0, y, x);
                let far = (y as isize - py as isize).abs() > r || (x as isize - px as isize).abs() > r;
                assert!(!(d && far), "{mode:?}: change at ({y},{x}) beyond radius {r}");
                changed += d as usize;
            }
        }
        assert!(changed > 0);
        assert!((r as usize) < h / 2, "radius {r} leaves no far field");
    }
}

fn gradcheck_model(mode: Mode, skip: SkipKind) {
    let mut a = arch(mode, skip);
    a.width = 2;
    a.levels = 2;
    a.align.groups = 1;
    a.align.reduction = 1;
    a.align.spatial_kernel = 3;
    let s = ModelState::init(a, 21).unwrap();
    let mut p: ParamStore<f64> = s.params.cast();
    randomize(&mut p, 22, 0.5);
    let (h, w) = (4, 6);
    let inputs: Vec<Tensor<f64>> = (0..3).map(|i| rand_tensor([1, 2, h, w], 30 + i, 1.0)).collect();
    let r = check_gradients_with_params(&p, &inputs, 1e-5, 6, 23, |g, v| {
        let pyr: Vec<Vec<Var>> = (0..2).map(|i| pyramid(g, 2, 1, h, w, 0.3 + 0.4 * i as f64)).collect();
        let out = match mode {
            Mode::Blind => s.forward_blind(g, &v[..2], &pyr).unwrap(),
            Mode::Nonblind => s.forward_nonblind(g, v[2], &v[..2], &pyr).unwrap(),
        };
        let probe = g.input(rand_tensor(g.value(out).shape(), 24, 1.0));
        let prod = g.mul_broadcast(out, probe);
        let zero = g.input(Tensor::zeros(g.value(out).shape()));
        g.l2_loss(prod, zero)
    });
    assert!(r.max_rel_error <= 1e-3, "{mode:?} {skip:?}: {r:?}");
}

#[test]
fn blind_forward_gradients() {
    gradcheck_model(Mode::Blind, SkipKind::Faam);
}

#[test]
fn nonblind_forward_gradients() {
    gradcheck_model(Mode::Nonblind, SkipKind::Fdam);
}

#[test]
fn stacked_forward_gradients() {
    gradcheck_model(Mode::Blind, SkipKind::Direct);
}
