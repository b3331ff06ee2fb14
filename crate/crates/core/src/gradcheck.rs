//! Central finite-difference gradient checks in fp64.
//!
//! The numeric side only ever evaluates forward passes on an inference
//! graph, so it shares no code with the backward closures it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Step used by all checks.
pub const FD_STEP: f64 = 1e-3;
/// Relative-error threshold all checks are held to.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Standard deviation of the noise added to freshly initialized parameters
/// before an end-to-end check, moving it off the near-degenerate
/// initialization point.
pub const GRADCHECK_JITTER: f64 = 0.1;

/// Adds `N(0, sd²)` noise to every parameter value.
pub fn jitter_params<R: rand::Rng>(store: &mut ParamStore<f64>, sd: f64, rng: &mut R) {
    for (_, p) in store.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

fn scalar_of(v: &Var<f64>) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::shape(
            "gradcheck",
            format!("function must return a scalar, got {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Checks `f` with respect to every element of every input. Returns the
/// worst relative error over the inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&out)?;
    let grads = g.backward(&out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var<f64>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        scalar_of(&f(&g, &vars)?)
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    Ok(worst)
}

/// Checks a parameterized loss on `samples` randomly chosen coordinates of
/// the trainable parameters (all coordinates when `samples` is `None`).
pub fn check_params<F>(
    store: &ParamStore<f64>,
    samples: Option<usize>,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    scalar_of(&out)?;
    let grads = g.backward(&out)?;

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad)
        .flat_map(|(id, p)| (0..p.tensor.numel()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = match samples {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, coords.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut work = store.clone();
    let mut analytic = Vec::with_capacity(chosen.len());
    let mut numeric = Vec::with_capacity(chosen.len());
    for &(id, i) in &chosen {
        analytic.push(grads.param(id).map_or(0.0, |g| g[i]));
        let x0 = store.tensor(id).data()[i];
        work.tensor_mut(id).data_mut()[i] = x0 + FD_STEP;
        let up = scalar_of(&f(&Graph::inference(), &work)?)?;
        work.tensor_mut(id).data_mut()[i] = x0 - FD_STEP;
        let down = scalar_of(&f(&Graph::inference(), &work)?)?;
        work.tensor_mut(id).data_mut()[i] = x0;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}
