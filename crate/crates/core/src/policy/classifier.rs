//! Regularized weighted surrogate-loss classification:
//!
//! ```text
//! min_r  (1/n) sum_i w_i * phi(l_i * r(x_i)) + rho * |r|^2
//! ```
//!
//! Linear rules carry an unpenalized intercept; kernel rules are linear in
//! Nyström features without intercept. The smoothed hinge is minimized by a
//! damped generalized-Newton method, the hinge through its box-constrained
//! dual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::surrogate::SurrogateLoss;
use super::DecisionFunction;
use crate::error::{Error, Result};
use crate::kernels::{self, KernelExpansion, KernelSpec, NystromMap};

/// Iteration cap shared by both solvers.
pub const MAX_ITERATIONS: usize = 5000;

/// Function class of a fitted rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassSpec {
    Linear,
    /// Gaussian kernel of bandwidth `gamma` through a rank-`rank` Nyström map
    /// (default `2 * ceil(sqrt(n))`).
    Kernel { gamma: f64, rank: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solver diagnostics for one classifier fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_inputs(n: usize, labels: &[f64], weights: &[f64], rho: f64) -> Result<()> {
    if labels.len() != n || weights.len() != n {
        return Err(Error::InvalidArgument(format!(
            "classifier got {n} rows, {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("weight {} at row {i} is not finite and nonnegative", weights[i])));
    }
    if let Some(l) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(Error::InvalidArgument(format!("label {l} is not +1 or -1")));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    Ok(())
}

/// Surrogate objective of the linear rule `x -> x^T beta + b`.
pub fn objective(
    x: &DMatrix<f64>,
    labels: &[f64],
    weights: &[f64],
    loss: SurrogateLoss,
    rho: f64,
    beta: &DVector<f64>,
    intercept: f64,
) -> f64 {
    let n = x.nrows() as f64;
    let scores = x * beta;
    let data: f64 = (0..x.nrows())
        .map(|i| weights[i] * loss.value(labels[i] * (scores[i] + intercept)))
        .sum();
    data / n + rho * beta.norm_squared()
}

/// Minimizes the surrogate objective over linear rules on the columns of `x`.
pub fn fit_linear(
    x: &DMatrix<f64>,
    labels: &[f64],
    weights: &[f64],
    loss: SurrogateLoss,
    rho: f64,
    intercept: bool,
) -> Result<LinearFit> {
    check_inputs(x.nrows(), labels, weights, rho)?;
    let fit = match loss {
        SurrogateLoss::SmoothHinge => newton(x, labels, weights, rho, intercept),
        SurrogateLoss::Hinge if intercept => smo(x, labels, weights, rho),
        SurrogateLoss::Hinge => dual_descent(x, labels, weights, rho),
    };
    let mut fit = fit;
    fit.objective = objective(x, labels, weights, loss, rho, &fit.weights, fit.intercept);
    Ok(fit)
}

fn newton(x: &DMatrix<f64>, labels: &[f64], weights: &[f64], rho: f64, intercept: bool) -> LinearFit {
    let (n, p) = x.shape();
    let dim = p + intercept as usize;
    let nf = n as f64;
    let mut theta: DVector<f64> = DVector::zeros(dim);
    let score = |theta: &DVector<f64>| -> DVector<f64> {
        let mut s = x * theta.rows(0, p);
        if intercept {
            s.add_scalar_mut(theta[p]);
        }
        s
    };
    let value = |theta: &DVector<f64>| -> f64 {
        let s = score(theta);
        let data: f64 = (0..n)
            .map(|i| weights[i] * SurrogateLoss::SmoothHinge.value(labels[i] * s[i]))
            .sum();
        data / nf + rho * theta.rows(0, p).norm_squared()
    };
    let mut g0: Option<f64> = None;
    let mut f = value(&theta);
    for it in 0..MAX_ITERATIONS {
        let s = score(&theta);
        let mut grad: DVector<f64> = DVector::zeros(dim);
        let mut hess: DMatrix<f64> = DMatrix::zeros(dim, dim);
        let mut active_rows = Vec::new();
        for i in 0..n {
            let t = labels[i] * s[i];
            if weights[i] > 0.0 && t < 1.0 {
                active_rows.push(i);
                let c = 2.0 * weights[i] * labels[i] * (t - 1.0) / nf;
                for j in 0..p {
                    grad[j] += c * x[(i, j)];
                }
                if intercept {
                    grad[p] += c;
                }
            }
        }
        for j in 0..p {
            grad[j] += 2.0 * rho * theta[j];
        }
        let gnorm = grad.norm();
        let scale = *g0.get_or_insert(gnorm);
        if gnorm <= 1e-10 * scale.max(1e-300) || gnorm < 1e-15 {
            return LinearFit { weights: theta.rows(0, p).into_owned(), intercept: if intercept { theta[p] } else { 0.0 }, objective: f, iterations: it, converged: true };
        }
        // generalized Hessian of the active quadratic pieces
        let mut xa = DMatrix::zeros(active_rows.len(), dim);
        for (r, &i) in active_rows.iter().enumerate() {
            let sw = (2.0 * weights[i] / nf).sqrt();
            for j in 0..p {
                xa[(r, j)] = sw * x[(i, j)];
            }
            if intercept {
                xa[(r, p)] = sw;
            }
        }
        hess += xa.tr_mul(&xa);
        for j in 0..p {
            hess[(j, j)] += 2.0 * rho;
        }
        let ridge = 1e-12 * (1.0 + hess.trace() / dim as f64);
        for j in 0..dim {
            hess[(j, j)] += ridge;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => hess.lu().solve(&(-&grad)).unwrap_or_else(|| -&grad),
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand = &theta + &step * t;
            let fc = value(&cand);
            if fc <= f + 1e-4 * t * slope {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return LinearFit { weights: theta.rows(0, p).into_owned(), intercept: if intercept { theta[p] } else { 0.0 }, objective: f, iterations: it, converged: gnorm <= 1e-6 * scale };
        }
    }
    LinearFit { weights: theta.rows(0, p).into_owned(), intercept: if intercept { theta[p] } else { 0.0 }, objective: f, iterations: MAX_ITERATIONS, converged: false }
}

/// Box constraints `C_i = w_i / (2 rho n)` of the hinge dual.
fn box_bounds(weights: &[f64], rho: f64) -> Vec<f64> {
    let n = weights.len() as f64;
    weights.iter().map(|w| w / (2.0 * rho * n)).collect()
}

/// Dual coordinate descent without intercept.
fn dual_descent(x: &DMatrix<f64>, labels: &[f64], weights: &[f64], rho: f64) -> LinearFit {
    let (n, p) = x.shape();
    let c = box_bounds(weights, rho);
    let mut alpha = vec![0.0; n];
    let mut beta = DVector::zeros(p);
    let diag: Vec<f64> = (0..n).map(|i| x.row(i).norm_squared()).collect();
    for epoch in 0..MAX_ITERATIONS * 10 {
        let mut worst = 0.0_f64;
        for i in 0..n {
            if diag[i] == 0.0 || c[i] == 0.0 {
                continue;
            }
            let g = labels[i] * x.row(i).dot(&beta.transpose()) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c[i] {
                g.max(0.0)
            } else {
                g
            };
            worst = worst.max(pg.abs());
            if pg != 0.0 {
                let new = (alpha[i] - g / diag[i]).clamp(0.0, c[i]);
                let d = (new - alpha[i]) * labels[i];
                alpha[i] = new;
                for j in 0..p {
                    beta[j] += d * x[(i, j)];
                }
            }
        }
        if worst < 1e-10 {
            return LinearFit { weights: beta, intercept: 0.0, objective: 0.0, iterations: epoch, converged: true };
        }
    }
    LinearFit { weights: beta, intercept: 0.0, objective: 0.0, iterations: MAX_ITERATIONS * 10, converged: false }
}

/// Sequential minimal optimization with the equality constraint induced by
/// the unpenalized intercept.
fn smo(x: &DMatrix<f64>, labels: &[f64], weights: &[f64], rho: f64) -> LinearFit {
    let (n, p) = x.shape();
    let c = box_bounds(weights, rho);
    let mut alpha = vec![0.0; n];
    let mut beta = DVector::zeros(p);
    let limit = MAX_ITERATIONS * n.max(10);
    let mut iterations = 0;
    let mut gap_ok = false;
    let mut neg_grad = vec![0.0; n];
    while iterations < limit {
        let s = x * &beta;
        // -l_t * G_t = l_t - x_t^T beta
        for t in 0..n {
            neg_grad[t] = labels[t] - s[t];
        }
        let up = |t: usize| (labels[t] > 0.0 && alpha[t] < c[t]) || (labels[t] < 0.0 && alpha[t] > 0.0);
        let low = |t: usize| (labels[t] < 0.0 && alpha[t] < c[t]) || (labels[t] > 0.0 && alpha[t] > 0.0);
        let (mut i, mut m) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut big_m) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            if up(t) && neg_grad[t] > m {
                m = neg_grad[t];
                i = t;
            }
            if low(t) && neg_grad[t] < big_m {
                big_m = neg_grad[t];
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || m - big_m < 1e-10 {
            gap_ok = true;
            break;
        }
        let curv = (x.row(i) - x.row(j)).norm_squared().max(1e-12);
        let mut delta = (m - big_m) / curv;
        delta = delta.min(if labels[i] > 0.0 { c[i] - alpha[i] } else { alpha[i] });
        delta = delta.min(if labels[j] > 0.0 { alpha[j] } else { c[j] - alpha[j] });
        alpha[i] += labels[i] * delta;
        alpha[j] -= labels[j] * delta;
        for k in 0..p {
            beta[k] += delta * (x[(i, k)] - x[(j, k)]);
        }
        iterations += 1;
    }
    let s = x * &beta;
    let free: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 1e-12 * c[t].max(1e-300) && alpha[t] < c[t] * (1.0 - 1e-12))
        .map(|t| labels[t] - s[t])
        .collect();
    let intercept = if free.is_empty() {
        let up_max = (0..n)
            .filter(|&t| (labels[t] > 0.0 && alpha[t] < c[t]) || (labels[t] < 0.0 && alpha[t] > 0.0))
            .map(|t| labels[t] - s[t])
            .fold(f64::NEG_INFINITY, f64::max);
        let low_min = (0..n)
            .filter(|&t| (labels[t] < 0.0 && alpha[t] < c[t]) || (labels[t] > 0.0 && alpha[t] > 0.0))
            .map(|t| labels[t] - s[t])
            .fold(f64::INFINITY, f64::min);
        match (up_max.is_finite(), low_min.is_finite()) {
            (true, true) => 0.5 * (up_max + low_min),
            (true, false) => up_max,
            (false, true) => low_min,
            _ => 0.0,
        }
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    LinearFit { weights: beta, intercept, objective: 0.0, iterations, converged: gap_ok }
}

/// Fits a rule of class `class` on the rows of `x` and returns it with the
/// solver diagnostics.
pub fn fit_weighted_classifier(
    x: &DMatrix<f64>,
    labels: &[f64],
    weights: &[f64],
    loss: SurrogateLoss,
    rho: f64,
    class: &ClassSpec,
    seed: u64,
) -> Result<(DecisionFunction, FitDiagnostics)> {
    check_inputs(x.nrows(), labels, weights, rho)?;
    match *class {
        ClassSpec::Linear => {
            let fit = fit_linear(x, labels, weights, loss, rho, true)?;
            let diag = FitDiagnostics { objective: fit.objective, iterations: fit.iterations, converged: fit.converged };
            Ok((DecisionFunction::Linear { weights: fit.weights, intercept: fit.intercept }, diag))
        }
        ClassSpec::Kernel { gamma, rank } => {
            let kernel = KernelSpec::new(gamma, x.ncols())?;
            let m = rank.unwrap_or_else(|| kernels::default_landmark_count(x.nrows())).min(x.nrows());
            let map = NystromMap::fit(&kernel, x, m, seed)?;
            fit_kernel_on_map(&map, x, labels, weights, loss, rho)
        }
    }
}

/// Kernel rule on a prebuilt Nyström map; rows of `x` may repeat.
pub fn fit_kernel_on_map(
    map: &NystromMap,
    x: &DMatrix<f64>,
    labels: &[f64],
    weights: &[f64],
    loss: SurrogateLoss,
    rho: f64,
) -> Result<(DecisionFunction, FitDiagnostics)> {
    fit_kernel_on_features(map, &map.features(x)?, labels, weights, loss, rho)
}

/// As [`fit_kernel_on_map`] with the feature rows `phi = map.features(x)`
/// already computed.
pub fn fit_kernel_on_features(
    map: &NystromMap,
    phi: &DMatrix<f64>,
    labels: &[f64],
    weights: &[f64],
    loss: SurrogateLoss,
    rho: f64,
) -> Result<(DecisionFunction, FitDiagnostics)> {
    let fit = fit_linear(phi, labels, weights, loss, rho, false)?;
    let expansion = KernelExpansion::new(map.kernel, map.landmarks.clone(), map.expansion_coefficients(&fit.weights))?;
    let diag = FitDiagnostics { objective: fit.objective, iterations: fit.iterations, converged: fit.converged };
    Ok((DecisionFunction::Kernel(expansion), diag))
}
