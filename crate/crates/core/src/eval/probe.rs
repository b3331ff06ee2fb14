//! Cross-validated, ℓ2-regularized logistic-regression probe.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auroc::auroc;
use crate::rng::stream;

/// Stopping threshold on the gradient norm of the probe objective.
pub const PROBE_GRAD_TOL: f64 = 1e-6;
/// Iteration cap of the probe solver.
pub const PROBE_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub grid: Vec<f64>,
    pub seed: u64,
    /// Standardize features with training-fold statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            grid: (0..=6).map(|e| 10f64.powi(e)).collect(),
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub heldout_auroc: f64,
    pub lambda: f64,
    /// Mean validation AUROC per grid value.
    pub cv_auroc: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

fn logloss(z: f64, y: bool) -> f64 {
    // log(1 + e^z) − y·z, evaluated stably.
    let sp = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    sp - if y { z } else { 0.0 }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `Σ logloss(w·x + b) + λ/2‖w‖²` with the bias unregularized.
pub fn logistic_objective(x: &[Vec<f64>], y: &[bool], lambda: f64, w: &[f64], b: f64) -> f64 {
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| logloss(b + w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>(), yi))
        .sum();
    data + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

fn gradient(x: &[Vec<f64>], y: &[bool], lambda: f64, w: &[f64], b: f64, gw: &mut [f64]) -> f64 {
    gw.iter_mut().zip(w).for_each(|(g, wi)| *g = lambda * wi);
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = b + w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
        let r = sigmoid(z) - if yi { 1.0 } else { 0.0 };
        gb += r;
        gw.iter_mut().zip(xi).for_each(|(g, v)| *g += r * v);
    }
    gb
}

/// Largest eigenvalue of `AᵀA` for `A = [X | 1]`, by power iteration.
fn gram_spectral_norm(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map_or(0, Vec::len) + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut est = 0.0;
    for _ in 0..200 {
        let av: Vec<f64> = x
            .iter()
            .map(|xi| xi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1])
            .collect();
        let mut next = vec![0.0; d];
        for (xi, s) in x.iter().zip(&av) {
            next.iter_mut().zip(xi).for_each(|(n, a)| *n += a * s);
            next[d - 1] += s;
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|a| *a /= norm);
        let converged = (norm - est).abs() <= 1e-10 * norm;
        est = norm;
        v = next;
        if converged {
            break;
        }
    }
    est
}

/// Minimizes the probe objective by accelerated full-batch gradient
/// descent with step `1/L` until the gradient norm drops below
/// [`PROBE_GRAD_TOL`] or [`PROBE_MAX_ITERS`] iterations.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], lambda: f64) -> Result<LogisticModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(
            "probe needs matching non-empty data".into(),
        ));
    }
    let d = x[0].len();
    if x.iter()
        .any(|r| r.len() != d || r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "degenerate features: ragged or non-finite".into(),
        ));
    }
    // Upper bound on the gradient's Lipschitz constant (1.01 covers
    // power-iteration slack).
    let lip = 1.01 * gram_spectral_norm(x) / 4.0 + lambda;
    let step = 1.0 / lip.max(1e-12);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut w_prev = w.clone();
    let mut b_prev = b;
    let mut gw = vec![0.0; d];
    let mut t = 1.0f64;
    for it in 0..PROBE_MAX_ITERS {
        // Convergence is judged at the current iterate.
        let gb = gradient(x, y, lambda, &w, b, &mut gw);
        let gnorm = (gb * gb + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();
        if gnorm < PROBE_GRAD_TOL {
            return Ok(LogisticModel {
                weights: w,
                bias: b,
                iterations: it,
            });
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        let yw: Vec<f64> = w
            .iter()
            .zip(&w_prev)
            .map(|(a, p)| a + mom * (a - p))
            .collect();
        let yb = b + mom * (b - b_prev);
        let gb = gradient(x, y, lambda, &yw, yb, &mut gw);
        let nw: Vec<f64> = yw.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
        let nb = yb - step * gb;
        // Restart momentum when the objective goes up.
        if logistic_objective(x, y, lambda, &nw, nb) > logistic_objective(x, y, lambda, &w, b) {
            t = 1.0;
            w_prev = w.clone();
            b_prev = b;
            continue;
        }
        w_prev = std::mem::replace(&mut w, nw);
        b_prev = std::mem::replace(&mut b, nb);
        t = t_next;
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        iterations: PROBE_MAX_ITERS,
    })
}

/// Per-feature mean and scale from training rows; constant features keep
/// scale 1.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let n = x.len() as f64;
        let d = x.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::InvalidArgument(
                "degenerate features: zero width".into(),
            ));
        }
        let mut mean = vec![0.0; d];
        for r in x {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in x {
            var.iter_mut()
                .zip(r)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        if var.iter().all(|v| *v <= 1e-24) {
            return Err(Error::InvalidArgument(
                "degenerate features: every feature is constant".into(),
            ));
        }
        let scale = var
            .iter()
            .map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

/// Fold index per sample: each class is shuffled with the seeded stream
/// and dealt round-robin, so every fold holds both classes.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least two folds".into()));
    }
    let mut assignment = vec![0; labels.len()];
    let mut rng = stream(seed, "folds", &[]);
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, too few for {folds} stratified folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    Ok(assignment)
}

fn fit_scored(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    eval_x: &[Vec<f64>],
    lambda: f64,
    standardize: bool,
) -> Result<Vec<f64>> {
    let st = if standardize {
        Standardizer::fit(train_x)?
    } else {
        Standardizer::identity(train_x[0].len())
    };
    let model = fit_logistic(&st.apply(train_x), train_y, lambda)?;
    Ok(st.apply(eval_x).iter().map(|r| model.decision(r)).collect())
}

/// Picks the grid value with the best mean validation AUROC (ties go to
/// the stronger penalty), refits on all training data, and scores the
/// held-out set.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    test_x: &[Vec<f64>],
    test_y: &[bool],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.len() < 10 || train_x.len() != train_y.len() {
        return Err(Error::InvalidArgument(format!(
            "probe needs >= 10 labelled samples, got {}",
            train_x.len()
        )));
    }
    if cfg.grid.is_empty() {
        return Err(Error::InvalidArgument("empty regularization grid".into()));
    }
    let folds = stratified_folds(train_y, cfg.folds, cfg.seed)?;
    let mut cv_auroc = Vec::with_capacity(cfg.grid.len());
    for &lambda in &cfg.grid {
        let mut total = 0.0;
        for f in 0..cfg.folds {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..train_x.len() {
                if folds[i] == f {
                    vx.push(train_x[i].clone());
                    vy.push(train_y[i]);
                } else {
                    tx.push(train_x[i].clone());
                    ty.push(train_y[i]);
                }
            }
            let scores = fit_scored(&tx, &ty, &vx, lambda, cfg.standardize)?;
            total += auroc(&scores, &vy)?;
        }
        cv_auroc.push((lambda, total / cfg.folds as f64));
    }
    let mut best = cv_auroc[0];
    for &(lambda, score) in &cv_auroc[1..] {
        if score > best.1 || (score == best.1 && lambda > best.0) {
            best = (lambda, score);
        }
    }
    let scores = fit_scored(train_x, train_y, test_x, best.0, cfg.standardize)?;
    Ok(ProbeResult {
        heldout_auroc: auroc(&scores, test_y)?,
        lambda: best.0,
        cv_auroc,
    })
}
