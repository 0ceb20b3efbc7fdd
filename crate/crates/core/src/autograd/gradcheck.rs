//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of the scalar produced by `build` against
/// central differences for up to `samples` coordinates of every input.
///
/// The relative error of one coordinate is
/// `|a - n| / max(|a|, |n|, floor)` where `floor` is `1e-3` times the largest
/// numeric gradient magnitude of that input, so that coordinates whose
/// gradient is negligible compared to the rest are measured on the input's
/// own scale.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, samples: usize, seed: u64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    check_gradients_with_params(&ParamStore::new(), inputs, step, samples, seed, build)
}

/// As [`check_gradients`], additionally checking every tensor of `params`.
/// `build` sees the parameters bound through [`Graph::with_params`] and
/// receives only the input variables.
pub fn check_gradients_with_params<F>(
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    samples: usize,
    seed: u64,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let np = params.len();
    let mut all: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    all.extend(inputs.iter().cloned());
    let graph_for = |vals: &[Tensor<f64>], track: bool| -> (Graph<f64>, Vec<Var>) {
        let mut store = params.clone();
        for (t, v) in store.tensors_mut().iter_mut().zip(vals) {
            *t = v.clone();
        }
        let mut g = Graph::with_params(&store, track);
        let vars: Vec<Var> = vals[np..].iter().map(|t| if track { g.variable(t.clone()) } else { g.input(t.clone()) }).collect();
        (g, vars)
    };
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let (mut g, vars) = graph_for(vals, false);
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let (mut g, vars) = graph_for(&all, true);
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let var_of = |k: usize| if k < np { g.param(ParamId(k)) } else { vars[k - np] };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in all.iter().enumerate() {
        let analytic = grads.get(var_of(k)).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let count = samples.min(input.numel());
        let idx = sample(&mut rng, input.numel(), count);
        let mut pairs = Vec::with_capacity(count);
        for i in idx.iter() {
            let mut vals = all.clone();
            vals[k].data_mut()[i] += step;
            let plus = eval(&vals);
            vals[k].data_mut()[i] -= 2.0 * step;
            let minus = eval(&vals);
            pairs.push((analytic.data()[i], (plus - minus) / (2.0 * step)));
        }
        let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(1e-12);
        for (a, n) in pairs {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = worst.max(err);
            checked += 1;
        }
    }
    GradCheckReport { max_rel_error: worst, checked }
}
