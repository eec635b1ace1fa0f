//! Central finite-difference oracle shared by the gradient test suites.
#![allow(dead_code)]

use doprompt_core::tensor::{Graph, ParamStore, Real, Tensor, Var};
use doprompt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative-error threshold for the engine's precision.
pub fn tolerance() -> f64 {
    if std::mem::size_of::<Real>() == 8 {
        1e-6
    } else {
        1e-3
    }
}

/// Default step for central differences at the engine's precision.
pub fn default_step() -> f64 {
    if std::mem::size_of::<Real>() == 8 {
        1e-5
    } else {
        5e-3
    }
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute error when both are tiny.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x` with step `h`. The divisor uses
/// the offsets actually representable at the engine's precision.
pub fn numeric_grad(x: &[Real], h: f64, mut f: impl FnMut(&[Real]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = (orig as f64 + h) as Real;
            let up_step = probe[i] as f64 - orig as f64;
            let up = f(&probe);
            probe[i] = (orig as f64 - h) as Real;
            let down_step = orig as f64 - probe[i] as f64;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (up_step + down_step)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.gen_range(-1.0..1.0) * scale) as Real)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks the gradient of an arbitrary graph function against central
/// differences. The output is reduced to a scalar by a fixed random
/// projection so every output element contributes. Returns the worst
/// relative error over all inputs.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let forward = |tensors: &[Tensor], track: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(&t.clone().with_requires_grad(track)))
            .collect();
        let out = build(&mut g, &vars).expect("op under test failed");
        (g, vars, out)
    };
    let (g0, _, out0) = forward(inputs, false);
    let out_shape = g0.shape(out0).to_vec();
    let n_out = g0.value(out0).len();
    let proj: Vec<Real> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.gen_range(-1.0..1.0) as Real).collect()
    };
    let objective = |tensors: &[Tensor]| -> f64 {
        let (g, _, out) = forward(tensors, false);
        g.value(out)
            .iter()
            .zip(&proj)
            .map(|(v, p)| *v as f64 * *p as f64)
            .sum()
    };

    let (mut g, vars, out) = forward(inputs, true);
    let p = g.constant(out_shape, proj.clone()).unwrap();
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(a) => a.iter().map(|x| *x as f64).collect(),
            None => vec![0.0; inputs[k].numel()],
        };
        let numeric = numeric_grad(inputs[k].data(), h, |probe| {
            let mut ts = inputs.to_vec();
            ts[k] = Tensor::new(inputs[k].shape().to_vec(), probe.to_vec()).unwrap();
            objective(&ts)
        });
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Relative error between backprop and central differences for each named
/// parameter of `store`, for a scalar loss built by `build`. `build` must be
/// deterministic (reseed any dropout RNG inside it).
pub fn check_params<F>(store: &ParamStore, names: &[&str], h: f64, build: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params_against(store, names, h, &build, |_: &str, s: &ParamStore| {
        let mut g = Graph::inference();
        let l = build(&mut g, s).expect("loss builds");
        g.value(l)[0] as f64
    })
}

/// As [`check_params`], but differentiates `numeric(name, probed_store)`
/// while backpropagating through `analytic`. `numeric` may be an independent
/// implementation of the loss, or one that holds a deliberately cut gradient
/// path fixed.
pub fn check_params_against<A, N>(
    store: &ParamStore,
    names: &[&str],
    h: f64,
    analytic: A,
    numeric: N,
) -> Vec<(String, f64)>
where
    A: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    N: Fn(&str, &ParamStore) -> f64,
{
    let mut g = Graph::new();
    let loss = analytic(&mut g, store).expect("loss builds");
    let grads = g.backward(loss).expect("backward");
    names
        .iter()
        .map(|&name| {
            let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
            let exact: Vec<f64> = match grads.get(id) {
                Some(a) => a.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; store.get(id).numel()],
            };
            let base = store.get(id).data().to_vec();
            let mut probe_store = store.clone();
            let approx = numeric_grad(&base, h, |probe| {
                probe_store.get_mut(id).data_mut().copy_from_slice(probe);
                numeric(name, &probe_store)
            });
            (name.to_string(), rel_error(&exact, &approx))
        })
        .collect()
}
