//! Closed-form kernel min-max estimation of the outcome bridge `h(W, a, L)`
//! and treatment bridge `q(Z, a, L)`, plus the cross-validated tuning loops.
//!
//! Both estimators solve a penalized quadratic program of the form
//!
//! ```text
//! min_f  (t - G f)^T M (t - G f) + 4 * lambda * f^T P f
//! ```
//!
//! where `M = K^{1/2} (c K + I)^{-1} K^{1/2}` comes from closing the inner
//! maximization over the adversary RKHS with Gram `K`. The exact form uses
//! dual coefficients over the training rows; the Nyström form works in a
//! rank-`m` feature space and is what the tuning loops use at scale.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, SampleTable, Standardization};
use crate::error::{Error, Result};
use crate::folds::FoldPlan;
use crate::kernels::{self, KernelExpansion, KernelSpec, NystromMap};
use crate::linalg;
use crate::rng;

/// Regularization scale `5 / n^0.4`.
pub fn regularization_scale(n: usize) -> f64 {
    5.0 / (n.max(1) as f64).powf(0.4)
}

/// Default adversary `L2` weight `1 / scale(n)^2`.
pub fn default_moment_weight(n: usize) -> f64 {
    regularization_scale(n).powi(-2)
}

/// Default product of the two penalty weights, `(s / 2) * scale(n)^4`.
pub fn default_penalty_product(s: f64, n: usize) -> f64 {
    0.5 * s * regularization_scale(n).powi(4)
}

/// How the Gram systems are solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BridgeSolver {
    /// Dual coefficients over every training row.
    Exact,
    /// Nyström features; `rank` defaults to `2 * ceil(sqrt(n))`.
    Nystrom { rank: Option<usize> },
}

impl Default for BridgeSolver {
    fn default() -> Self {
        BridgeSolver::Nystrom { rank: None }
    }
}

/// Solver plus the seed used for landmark sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub solver: BridgeSolver,
    pub seed: u64,
}

impl SolveOptions {
    pub fn exact() -> Self {
        Self { solver: BridgeSolver::Exact, seed: 0 }
    }

    pub fn nystrom(seed: u64) -> Self {
        Self { solver: BridgeSolver::Nystrom { rank: None }, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeTuning {
    pub s_grid: Vec<f64>,
    pub gamma_quantiles: Vec<f64>,
    pub folds: usize,
    pub solver: BridgeSolver,
    /// Pairwise-distance statistics use at most this many evenly spaced rows.
    pub bandwidth_rows: usize,
}

impl Default for BridgeTuning {
    fn default() -> Self {
        Self {
            s_grid: vec![0.02, 0.2, 2.0, 20.0],
            gamma_quantiles: (1..=9).map(|i| i as f64 / 10.0).collect(),
            folds: 5,
            solver: BridgeSolver::default(),
            bandwidth_rows: 1000,
        }
    }
}

impl BridgeTuning {
    pub fn validate(&self) -> Result<()> {
        if self.s_grid.is_empty() || self.s_grid.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("s_grid must be nonempty and positive".into()));
        }
        if self.gamma_quantiles.is_empty()
            || self.gamma_quantiles.iter().any(|p| !(*p > 0.0 && *p < 1.0))
        {
            return Err(Error::InvalidArgument("gamma quantiles must lie in (0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidArgument("bridge tuning needs at least 2 folds".into()));
        }
        if self.bandwidth_rows < 2 {
            return Err(Error::InvalidArgument("bandwidth_rows must be at least 2".into()));
        }
        Ok(())
    }
}

/// Cross-validation record of one tuned bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    /// Median-heuristic bandwidth of the adversary kernel.
    pub adversary_gamma: f64,
    pub gamma_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
    /// Fold-averaged validation loss, indexed `[gamma][s]`.
    pub loss: Vec<Vec<f64>>,
    pub best_gamma: f64,
    pub best_s: f64,
    pub moment_weight: f64,
    pub penalty_product: f64,
    pub rows: usize,
}

/// The moment metric `M = K^{1/2} (c K + I)^{-1} K^{1/2}` for `c = weight / n`.
#[derive(Debug, Clone)]
pub enum MomentMetric {
    Dense(DMatrix<f64>),
    /// `M = U diag(w) U^T` with orthonormal `U`.
    LowRank { basis: DMatrix<f64>, weights: DVector<f64> },
}

impl MomentMetric {
    /// From the full Gram matrix, via its eigendecomposition.
    pub fn exact(gram: &DMatrix<f64>, c: f64) -> Self {
        MomentMetric::Dense(linalg::sym_spectral_map(gram, |v| {
            let v = v.max(0.0);
            v / (c * v + 1.0)
        }))
    }

    /// From Nyström features `phi` with `K ~ phi phi^T`.
    pub fn low_rank(phi: &DMatrix<f64>, c: f64) -> Self {
        let (basis, s2) = linalg::thin_left_factor(phi);
        let weights = s2.map(|v| v / (c * v + 1.0));
        MomentMetric::LowRank { basis, weights }
    }

    /// Builds the metric on rows `x` for kernel `kernel` and weight `c`.
    pub fn build(kernel: &KernelSpec, x: &DMatrix<f64>, c: f64, opts: &SolveOptions) -> Result<Self> {
        match opts.solver {
            BridgeSolver::Exact => Ok(Self::exact(&kernels::gram_sym(kernel, x)?, c)),
            BridgeSolver::Nystrom { rank } => {
                let m = rank.unwrap_or_else(|| kernels::default_landmark_count(x.nrows())).min(x.nrows());
                let map = NystromMap::fit(kernel, x, m, rng::derive(opts.seed, 0x6d6d))?;
                Ok(Self::low_rank(&map.features(x)?, c))
            }
        }
    }

    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        match self {
            MomentMetric::Dense(m) => r.dot(&(m * r)),
            MomentMetric::LowRank { basis, weights } => {
                let p = basis.tr_mul(r);
                p.iter().zip(weights.iter()).map(|(a, w)| w * a * a).sum()
            }
        }
    }

    /// `(G^T M G, G^T M t)`.
    fn normal_equations(&self, g: &DMatrix<f64>, t: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        match self {
            MomentMetric::Dense(m) => {
                let mg = m * g;
                (g.tr_mul(&mg), mg.tr_mul(t))
            }
            MomentMetric::LowRank { basis, weights } => {
                let b = basis.tr_mul(g);
                let bt = basis.tr_mul(t);
                let mut wb = b.clone();
                for (mut row, w) in wb.row_iter_mut().zip(weights.iter()) {
                    row *= *w;
                }
                (b.tr_mul(&wb), wb.tr_mul(&bt))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MomentMetric::Dense(m) => m.nrows(),
            MomentMetric::LowRank { basis, .. } => basis.nrows(),
        }
    }
}

/// Hypothesis-side design on the training rows.
///
/// Exact duals are parametrized in the eigenbasis `V` of the hypothesis Gram:
/// with `K = V diag(l) V^T`, the pseudoinverse solution
/// `(K S K + 4 lam K)^+ K c` equals `V (V^T S V diag(l) + 4 lam I)^{-1} V^T c`,
/// which never divides by small eigenvalues. Nyström primals use the feature
/// matrix directly with an identity penalty.
struct Design {
    /// Rows of the training design (`V` or `phi`), zeroed where masked.
    values: DMatrix<f64>,
    /// Retained Gram eigenvalues for the dual; `None` for the primal.
    spectrum: Option<DVector<f64>>,
    /// Maps solved coordinates to expansion coefficients over `centers`.
    lift: DMatrix<f64>,
    centers: DMatrix<f64>,
    kernel: KernelSpec,
}

impl Design {
    fn build(kernel: &KernelSpec, x: &DMatrix<f64>, landmarks: Option<&[usize]>) -> Result<Self> {
        match landmarks {
            None => {
                let eig = linalg::sym_eigen(&kernels::gram_sym(kernel, x)?);
                let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
                let tol = linalg::pinv_tolerance(x.nrows(), x.nrows(), top);
                let keep: Vec<usize> = (0..x.nrows()).filter(|&j| eig.eigenvalues[j] > tol).collect();
                let v = eig.eigenvectors.select_columns(&keep);
                let spectrum = DVector::from_iterator(keep.len(), keep.iter().map(|&j| eig.eigenvalues[j]));
                Ok(Self { values: v.clone(), spectrum: Some(spectrum), lift: v, centers: x.clone(), kernel: *kernel })
            }
            Some(rows) => {
                let map = NystromMap::from_rows(kernel, x, rows)?;
                let phi = map.features(x)?;
                Ok(Self { values: phi, spectrum: None, lift: map.whitening, centers: map.landmarks, kernel: *kernel })
            }
        }
    }

    fn masked(mut self, mask: &[bool]) -> Self {
        for (i, keep) in mask.iter().enumerate() {
            if !keep {
                self.values.row_mut(i).fill(0.0);
            }
        }
        self
    }

    fn solve(&self, gtmg: &DMatrix<f64>, gtmt: &DVector<f64>, penalty_product: f64) -> Result<KernelExpansion> {
        let mut a = match &self.spectrum {
            Some(l) => gtmg * DMatrix::from_diagonal(l),
            None => gtmg.clone(),
        };
        for i in 0..a.nrows() {
            a[(i, i)] += 4.0 * penalty_product;
        }
        let coord = a
            .lu()
            .solve(gtmt)
            .ok_or_else(|| Error::NumericOverflow { row: 0, what: "singular bridge system".into() })?;
        let coef = &self.lift * coord;
        if let Some(i) = coef.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { row: i, what: "bridge coefficient".into() });
        }
        KernelExpansion::new(self.kernel, self.centers.clone(), coef)
    }
}

fn landmark_rows(n: usize, opts: &SolveOptions, tag: u64) -> Option<Vec<usize>> {
    match opts.solver {
        BridgeSolver::Exact => None,
        BridgeSolver::Nystrom { rank } => {
            let m = rank.unwrap_or_else(|| kernels::default_landmark_count(n)).min(n);
            let mut rows = if m == n {
                (0..n).collect()
            } else {
                rand::seq::index::sample(&mut rng::stream(rng::derive(opts.seed, tag), 0x4c4d), n, m).into_vec()
            };
            rows.sort_unstable();
            Some(rows)
        }
    }
}

fn check_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if a.nrows() != n || b.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "{what}: blocks have {} and {} rows, expected {n}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

/// Outcome bridge for one arm.
///
/// `x_h` holds the `[W, L]` rows and `x_f` the `[Z, L]` rows of the arm;
/// `moment_weight / n` scales the adversary Gram inside the metric.
#[allow(clippy::too_many_arguments)]
pub fn solve_outcome_bridge(
    x_h: &DMatrix<f64>,
    x_f: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel_h: &KernelSpec,
    kernel_f: &KernelSpec,
    moment_weight: f64,
    penalty_product: f64,
    opts: &SolveOptions,
) -> Result<KernelExpansion> {
    let n = y.len();
    if n == 0 {
        return Err(Error::DegenerateData("outcome bridge arm is empty".into()));
    }
    check_rows(x_h, x_f, n, "outcome bridge")?;
    check_penalties(moment_weight, penalty_product)?;
    let metric = MomentMetric::build(kernel_f, x_f, moment_weight / n as f64, opts)?;
    let design = Design::build(kernel_h, x_h, landmark_rows(n, opts, 0x68).as_deref())?;
    let (gtmg, gtmt) = metric.normal_equations(&design.values, y);
    design.solve(&gtmg, &gtmt, penalty_product)
}

/// Treatment bridge for arm `arm` over all rows.
///
/// `x_q` holds `[Z, L]`, `x_g` holds `[W, L]`; every row enters the metric,
/// only rows with `A = arm` enter the hypothesis side.
#[allow(clippy::too_many_arguments)]
pub fn solve_treatment_bridge(
    x_q: &DMatrix<f64>,
    x_g: &DMatrix<f64>,
    arms: &[Arm],
    arm: Arm,
    kernel_q: &KernelSpec,
    kernel_g: &KernelSpec,
    moment_weight: f64,
    penalty_product: f64,
    opts: &SolveOptions,
) -> Result<KernelExpansion> {
    let n = arms.len();
    check_rows(x_q, x_g, n, "treatment bridge")?;
    check_penalties(moment_weight, penalty_product)?;
    let mask: Vec<bool> = arms.iter().map(|&a| a == arm).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateData(format!("arm {arm:?} is absent")));
    }
    let metric = MomentMetric::build(kernel_g, x_g, moment_weight / n as f64, opts)?;
    let design = Design::build(kernel_q, x_q, landmark_rows(n, opts, 0x71).as_deref())?.masked(&mask);
    let (gtmg, gtmt) = metric.normal_equations(&design.values, &DVector::from_element(n, 1.0));
    design.solve(&gtmg, &gtmt, penalty_product)
}

fn check_penalties(moment_weight: f64, penalty_product: f64) -> Result<()> {
    if !(moment_weight.is_finite() && moment_weight > 0.0 && penalty_product.is_finite() && penalty_product > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bridge penalties must be positive, got {moment_weight} and {penalty_product}"
        )));
    }
    Ok(())
}

fn bandwidth_subset(n: usize, cap: usize) -> Option<Vec<usize>> {
    kernels::thin_rows(n, cap)
}

fn argmin_cell(loss: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::INFINITY;
    for (g, row) in loss.iter().enumerate() {
        for (s, &v) in row.iter().enumerate() {
            if v < best_v {
                best_v = v;
                best = (g, s);
            }
        }
    }
    best
}

fn check_fold_sizes(plan: &FoldPlan, what: &str) -> Result<()> {
    for (f, size) in plan.fold_sizes().into_iter().enumerate() {
        if size < 2 || plan.n() - size < 2 {
            return Err(Error::DegenerateFold(format!("{what}: fold {f} has {size} rows")));
        }
    }
    Ok(())
}

/// Cross-validated outcome bridge for one arm; inputs are standardized
/// `[W, L]`, `[Z, L]` and `Y` of that arm.
pub fn tune_outcome_bridge(
    x_h: &DMatrix<f64>,
    x_f: &DMatrix<f64>,
    y: &DVector<f64>,
    tuning: &BridgeTuning,
    seed: u64,
) -> Result<(KernelExpansion, TuningReport)> {
    tuning.validate()?;
    let n = y.len();
    check_rows(x_h, x_f, n, "outcome bridge")?;
    if n < 2 * tuning.folds {
        return Err(Error::DegenerateFold(format!(
            "outcome bridge arm has {n} rows, need at least {}",
            2 * tuning.folds
        )));
    }
    let sub = bandwidth_subset(n, tuning.bandwidth_rows);
    let kernel_f = KernelSpec::new(kernels::median_bandwidth(x_f, sub.as_deref())?, x_f.ncols())?;
    let gamma_grid = kernels::quantile_bandwidths(x_h, sub.as_deref(), &tuning.gamma_quantiles)?;
    if gamma_grid.is_empty() {
        return Err(Error::DegenerateData("no positive distance quantiles for the bridge kernel".into()));
    }
    let plan = FoldPlan::random(n, tuning.folds, rng::derive(seed, 1))?;
    check_fold_sizes(&plan, "outcome bridge")?;

    let per_fold: Vec<Vec<Vec<f64>>> = (0..tuning.folds)
        .into_par_iter()
        .map(|k| {
            let train = plan.train_rows(k);
            let test = plan.test_rows(k);
            let (nt, nv) = (train.len(), test.len());
            let opts = SolveOptions { solver: tuning.solver, seed: rng::derive(seed, 100 + k as u64) };
            let xh_t = x_h.select_rows(&train);
            let xh_v = x_h.select_rows(&test);
            let y_t = y.select_rows(&train);
            let y_v = y.select_rows(&test);
            let m_t = MomentMetric::build(&kernel_f, &x_f.select_rows(&train), default_moment_weight(nt) / nt as f64, &opts)?;
            let m_v = MomentMetric::build(&kernel_f, &x_f.select_rows(&test), default_moment_weight(nv) / nv as f64, &opts)?;
            let marks = landmark_rows(nt, &opts, 0x68);
            gamma_grid
                .iter()
                .map(|&g| {
                    let kernel_h = KernelSpec::new(g, x_h.ncols())?;
                    let design = Design::build(&kernel_h, &xh_t, marks.as_deref())?;
                    let (gtmg, gtmt) = m_t.normal_equations(&design.values, &y_t);
                    let cross = kernels::gram(&kernel_h, &xh_v, &design.centers)?;
                    tuning
                        .s_grid
                        .iter()
                        .map(|&s| {
                            let f = design.solve(&gtmg, &gtmt, default_penalty_product(s, nt))?;
                            let r = &y_v - &cross * &f.coefficients;
                            Ok(m_v.quad_form(&r) / (nv * nv) as f64)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let loss = average_folds(&per_fold);
    let (gi, si) = argmin_cell(&loss);
    let kernel_h = KernelSpec::new(gamma_grid[gi], x_h.ncols())?;
    let moment_weight = default_moment_weight(n);
    let penalty_product = default_penalty_product(tuning.s_grid[si], n);
    let opts = SolveOptions { solver: tuning.solver, seed: rng::derive(seed, 2) };
    let fit = solve_outcome_bridge(x_h, x_f, y, &kernel_h, &kernel_f, moment_weight, penalty_product, &opts)?;
    let report = TuningReport {
        adversary_gamma: kernel_f.gamma,
        gamma_grid: gamma_grid.clone(),
        s_grid: tuning.s_grid.clone(),
        loss,
        best_gamma: gamma_grid[gi],
        best_s: tuning.s_grid[si],
        moment_weight,
        penalty_product,
        rows: n,
    };
    Ok((fit, report))
}

/// Cross-validated treatment bridge for `arm`; inputs are standardized
/// `[Z, L]` and `[W, L]` over all rows.
pub fn tune_treatment_bridge(
    x_q: &DMatrix<f64>,
    x_g: &DMatrix<f64>,
    arms: &[Arm],
    arm: Arm,
    tuning: &BridgeTuning,
    seed: u64,
) -> Result<(KernelExpansion, TuningReport)> {
    tuning.validate()?;
    let n = arms.len();
    check_rows(x_q, x_g, n, "treatment bridge")?;
    let arm_rows: Vec<usize> = (0..n).filter(|&i| arms[i] == arm).collect();
    let n_arm = arm_rows.len();
    if n_arm < 2 * tuning.folds {
        return Err(Error::DegenerateFold(format!(
            "treatment bridge arm has {n_arm} rows, need at least {}",
            2 * tuning.folds
        )));
    }
    let sub_all = bandwidth_subset(n, tuning.bandwidth_rows);
    let kernel_g = KernelSpec::new(kernels::median_bandwidth(x_g, sub_all.as_deref())?, x_g.ncols())?;
    let arm_sub: Vec<usize> = match bandwidth_subset(n_arm, tuning.bandwidth_rows) {
        Some(s) => s.into_iter().map(|i| arm_rows[i]).collect(),
        None => arm_rows.clone(),
    };
    let gamma_grid = kernels::quantile_bandwidths(x_q, Some(&arm_sub), &tuning.gamma_quantiles)?;
    if gamma_grid.is_empty() {
        return Err(Error::DegenerateData("no positive distance quantiles for the bridge kernel".into()));
    }
    let plan = FoldPlan::stratified(arms, tuning.folds, rng::derive(seed, 3))?;
    check_fold_sizes(&plan, "treatment bridge")?;

    let per_fold: Vec<Vec<Vec<f64>>> = (0..tuning.folds)
        .into_par_iter()
        .map(|k| {
            let train = plan.train_rows(k);
            let test = plan.test_rows(k);
            let (nt, nv) = (train.len(), test.len());
            let na_t = train.iter().filter(|&&i| arms[i] == arm).count();
            let na_v = test.iter().filter(|&&i| arms[i] == arm).count();
            if na_t == 0 || na_v == 0 {
                return Err(Error::DegenerateFold(format!("fold {k} lacks arm {arm:?}")));
            }
            let opts = SolveOptions { solver: tuning.solver, seed: rng::derive(seed, 200 + k as u64) };
            let xq_t = x_q.select_rows(&train);
            let xq_v = x_q.select_rows(&test);
            let mask_t: Vec<bool> = train.iter().map(|&i| arms[i] == arm).collect();
            let ind_v = DVector::from_iterator(nv, test.iter().map(|&i| (arms[i] == arm) as u8 as f64));
            let ones_t = DVector::from_element(nt, 1.0);
            let m_t = MomentMetric::build(&kernel_g, &x_g.select_rows(&train), default_moment_weight(na_t) / nt as f64, &opts)?;
            let m_v = MomentMetric::build(&kernel_g, &x_g.select_rows(&test), default_moment_weight(na_v) / nv as f64, &opts)?;
            let marks = landmark_rows(nt, &opts, 0x71);
            gamma_grid
                .iter()
                .map(|&g| {
                    let kernel_q = KernelSpec::new(g, x_q.ncols())?;
                    let design = Design::build(&kernel_q, &xq_t, marks.as_deref())?.masked(&mask_t);
                    let (gtmg, gtmt) = m_t.normal_equations(&design.values, &ones_t);
                    let cross = kernels::gram(&kernel_q, &xq_v, &design.centers)?;
                    tuning
                        .s_grid
                        .iter()
                        .map(|&s| {
                            let f = design.solve(&gtmg, &gtmt, default_penalty_product(s, na_t))?;
                            let pred = &cross * &f.coefficients;
                            let r = DVector::from_fn(nv, |i, _| 1.0 - ind_v[i] * pred[i]);
                            Ok(m_v.quad_form(&r) / (nv * nv) as f64)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let loss = average_folds(&per_fold);
    let (gi, si) = argmin_cell(&loss);
    let kernel_q = KernelSpec::new(gamma_grid[gi], x_q.ncols())?;
    let moment_weight = default_moment_weight(n_arm);
    let penalty_product = default_penalty_product(tuning.s_grid[si], n_arm);
    let opts = SolveOptions { solver: tuning.solver, seed: rng::derive(seed, 4) };
    let fit = solve_treatment_bridge(x_q, x_g, arms, arm, &kernel_q, &kernel_g, moment_weight, penalty_product, &opts)?;
    let report = TuningReport {
        adversary_gamma: kernel_g.gamma,
        gamma_grid: gamma_grid.clone(),
        s_grid: tuning.s_grid.clone(),
        loss,
        best_gamma: gamma_grid[gi],
        best_s: tuning.s_grid[si],
        moment_weight,
        penalty_product,
        rows: n,
    };
    Ok((fit, report))
}

fn average_folds(per_fold: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let k = per_fold.len() as f64;
    let mut out = per_fold[0].clone();
    for fold in &per_fold[1..] {
        for (row, frow) in out.iter_mut().zip(fold) {
            for (v, f) in row.iter_mut().zip(frow) {
                *v += f;
            }
        }
    }
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    out
}

/// Anything that evaluates `h(W_i, arm, L_i)` on the rows of a table, in the
/// table's outcome units.
pub trait OutcomeModel: Send + Sync {
    fn outcome_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>>;
}

/// Anything that evaluates `q(Z_i, arm, L_i)` on the rows of a table.
pub trait TreatmentModel: Send + Sync {
    fn treatment_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>>;
}

/// `q(Z_i, A_i, L_i)` at each row's observed arm.
pub fn treatment_at_observed(q: &dyn TreatmentModel, data: &SampleTable) -> Result<DVector<f64>> {
    let plus = q.treatment_bridge(data, Arm::Treated)?;
    let minus = q.treatment_bridge(data, Arm::Control)?;
    Ok(DVector::from_fn(data.n(), |i, _| if data.a()[i].is_treated() { plus[i] } else { minus[i] }))
}

/// One arm's fitted expansion and how it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmBridge {
    pub expansion: KernelExpansion,
    pub report: TuningReport,
}

/// Kernel outcome bridges for both arms, fitted on standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBridges {
    pub treated: ArmBridge,
    pub control: ArmBridge,
    pub standardization: Standardization,
}

/// Kernel treatment bridges for both arms, fitted on standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentBridges {
    pub treated: ArmBridge,
    pub control: ArmBridge,
    pub standardization: Standardization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgePair {
    pub outcome: OutcomeBridges,
    pub treatment: TreatmentBridges,
}

fn pick<'a>(arm: Arm, treated: &'a ArmBridge, control: &'a ArmBridge) -> &'a KernelExpansion {
    if arm.is_treated() {
        &treated.expansion
    } else {
        &control.expansion
    }
}

impl OutcomeModel for OutcomeBridges {
    fn outcome_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>> {
        let s = &self.standardization;
        let std = data.standardized_with(s);
        let raw = pick(arm, &self.treated, &self.control).eval(&std.wl())?;
        Ok(raw.map(|v| s.y.inverse(v)))
    }
}

impl TreatmentModel for TreatmentBridges {
    fn treatment_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>> {
        let std = data.standardized_with(&self.standardization);
        pick(arm, &self.treated, &self.control).eval(&std.zl())
    }
}

impl OutcomeModel for BridgePair {
    fn outcome_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>> {
        self.outcome.outcome_bridge(data, arm)
    }
}

impl TreatmentModel for BridgePair {
    fn treatment_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>> {
        self.treatment.treatment_bridge(data, arm)
    }
}

/// Tunes and fits both outcome bridges on `data` (standardized internally).
pub fn fit_outcome_bridges(data: &SampleTable, tuning: &BridgeTuning, seed: u64) -> Result<OutcomeBridges> {
    let standardization = data.fit_standardization();
    let std = data.standardized_with(&standardization);
    let xh = std.wl();
    let xf = std.zl();
    let fit_arm = |arm: Arm, tag: u64| -> Result<ArmBridge> {
        let rows = std.arm_indices(arm);
        if rows.is_empty() {
            return Err(Error::DegenerateData(format!("arm {arm:?} is absent")));
        }
        let (expansion, report) = tune_outcome_bridge(
            &xh.select_rows(&rows),
            &xf.select_rows(&rows),
            &std.y().select_rows(&rows),
            tuning,
            rng::derive(seed, tag),
        )?;
        Ok(ArmBridge { expansion, report })
    };
    Ok(OutcomeBridges {
        treated: fit_arm(Arm::Treated, 11)?,
        control: fit_arm(Arm::Control, 12)?,
        standardization,
    })
}

/// Tunes and fits both treatment bridges on `data` (standardized internally).
pub fn fit_treatment_bridges(data: &SampleTable, tuning: &BridgeTuning, seed: u64) -> Result<TreatmentBridges> {
    let standardization = data.fit_standardization();
    let std = data.standardized_with(&standardization);
    let xq = std.zl();
    let xg = std.wl();
    let fit_arm = |arm: Arm, tag: u64| -> Result<ArmBridge> {
        let (expansion, report) = tune_treatment_bridge(&xq, &xg, std.a(), arm, tuning, rng::derive(seed, tag))?;
        Ok(ArmBridge { expansion, report })
    };
    Ok(TreatmentBridges {
        treated: fit_arm(Arm::Treated, 21)?,
        control: fit_arm(Arm::Control, 22)?,
        standardization,
    })
}

pub fn fit_bridge_pair(data: &SampleTable, tuning: &BridgeTuning, seed: u64) -> Result<BridgePair> {
    Ok(BridgePair {
        outcome: fit_outcome_bridges(data, tuning, rng::derive(seed, 1))?,
        treatment: fit_treatment_bridges(data, tuning, rng::derive(seed, 2))?,
    })
}

/// Produces bridge models for a training subset; learners call this once per
/// fold.
pub trait BridgeFitter: Send + Sync {
    fn fit_outcome(&self, data: &SampleTable, seed: u64) -> Result<Arc<dyn OutcomeModel>>;
    fn fit_treatment(&self, data: &SampleTable, seed: u64) -> Result<Arc<dyn TreatmentModel>>;
}

/// Kernel min-max bridges tuned by cross-validation.
#[derive(Debug, Clone, Default)]
pub struct KernelBridgeFitter {
    pub tuning: BridgeTuning,
}

impl BridgeFitter for KernelBridgeFitter {
    fn fit_outcome(&self, data: &SampleTable, seed: u64) -> Result<Arc<dyn OutcomeModel>> {
        Ok(Arc::new(fit_outcome_bridges(data, &self.tuning, seed)?))
    }

    fn fit_treatment(&self, data: &SampleTable, seed: u64) -> Result<Arc<dyn TreatmentModel>> {
        Ok(Arc::new(fit_treatment_bridges(data, &self.tuning, seed)?))
    }
}

/// Hash of every value in a table (bit patterns), used as a cache key.
pub fn table_fingerprint(data: &SampleTable) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    data.n().hash(&mut h);
    for block in [data.l(), data.z(), data.w()] {
        block.ncols().hash(&mut h);
        block.iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    data.a().hash(&mut h);
    data.y().iter().for_each(|v| v.to_bits().hash(&mut h));
    h.finish()
}

/// Kernel fitter that memoizes fits by `(seed, table)` and keeps them for
/// inspection. Learners run on the same data with the same seed then share
/// their bridge fits.
#[derive(Debug, Default)]
pub struct CachedKernelFitter {
    pub tuning: BridgeTuning,
    outcome: Mutex<BTreeMap<(u64, u64), Arc<OutcomeBridges>>>,
    treatment: Mutex<BTreeMap<(u64, u64), Arc<TreatmentBridges>>>,
}

impl CachedKernelFitter {
    pub fn new(tuning: BridgeTuning) -> Self {
        Self { tuning, ..Default::default() }
    }

    pub fn outcome_bridges(&self, data: &SampleTable, seed: u64) -> Result<Arc<OutcomeBridges>> {
        let key = (seed, table_fingerprint(data));
        if let Some(hit) = self.outcome.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let fit = Arc::new(fit_outcome_bridges(data, &self.tuning, seed)?);
        self.outcome.lock().unwrap().insert(key, fit.clone());
        Ok(fit)
    }

    pub fn treatment_bridges(&self, data: &SampleTable, seed: u64) -> Result<Arc<TreatmentBridges>> {
        let key = (seed, table_fingerprint(data));
        if let Some(hit) = self.treatment.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let fit = Arc::new(fit_treatment_bridges(data, &self.tuning, seed)?);
        self.treatment.lock().unwrap().insert(key, fit.clone());
        Ok(fit)
    }

    /// Cached outcome fits on tables of `rows` rows.
    pub fn outcome_fits_with_rows(&self, rows: usize) -> Vec<Arc<OutcomeBridges>> {
        let map = self.outcome.lock().unwrap();
        map.values().filter(|f| f.treated.report.rows + f.control.report.rows == rows).cloned().collect()
    }

    /// Cached treatment fits on tables of `rows` rows.
    pub fn treatment_fits_with_rows(&self, rows: usize) -> Vec<Arc<TreatmentBridges>> {
        let map = self.treatment.lock().unwrap();
        map.values().filter(|f| f.treated.report.rows == rows).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.outcome.lock().unwrap().len() + self.treatment.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BridgeFitter for CachedKernelFitter {
    fn fit_outcome(&self, data: &SampleTable, seed: u64) -> Result<Arc<dyn OutcomeModel>> {
        Ok(self.outcome_bridges(data, seed)?)
    }

    fn fit_treatment(&self, data: &SampleTable, seed: u64) -> Result<Arc<dyn TreatmentModel>> {
        Ok(self.treatment_bridges(data, seed)?)
    }
}

/// Ignores the training data and hands back the same models every time;
/// used to plug in known or deliberately wrong bridges.
#[derive(Clone)]
pub struct FixedBridges {
    pub outcome: Arc<dyn OutcomeModel>,
    pub treatment: Arc<dyn TreatmentModel>,
}

impl BridgeFitter for FixedBridges {
    fn fit_outcome(&self, _: &SampleTable, _: u64) -> Result<Arc<dyn OutcomeModel>> {
        Ok(self.outcome.clone())
    }

    fn fit_treatment(&self, _: &SampleTable, _: u64) -> Result<Arc<dyn TreatmentModel>> {
        Ok(self.treatment.clone())
    }
}

/// Bridge defined by a closure over the table, handy for constants and
/// analytic truths.
pub struct FnBridge<F>(pub F);

impl<F> OutcomeModel for FnBridge<F>
where
    F: Fn(&SampleTable, Arm) -> Result<DVector<f64>> + Send + Sync,
{
    fn outcome_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>> {
        (self.0)(data, arm)
    }
}

impl<F> TreatmentModel for FnBridge<F>
where
    F: Fn(&SampleTable, Arm) -> Result<DVector<f64>> + Send + Sync,
{
    fn treatment_bridge(&self, data: &SampleTable, arm: Arm) -> Result<DVector<f64>> {
        (self.0)(data, arm)
    }
}

/// Per-arm constants `(treated, control)`.
pub fn constant_bridge(treated: f64, control: f64) -> FnBridge<impl Fn(&SampleTable, Arm) -> Result<DVector<f64>> + Send + Sync> {
    FnBridge(move |data: &SampleTable, arm: Arm| {
        Ok(DVector::from_element(data.n(), if arm.is_treated() { treated } else { control }))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 9);
        DMatrix::from_fn(n, d, |_, _| r.sample(StandardNormal))
    }

    /// Textbook route: explicit eigendecomposition for `K^{1/2}`, explicit
    /// inverse, explicit pseudoinverse.
    fn dense_h(xh: &DMatrix<f64>, xf: &DMatrix<f64>, y: &DVector<f64>, gh: f64, gf: f64, xi: f64, lam: f64) -> DVector<f64> {
        let n = y.len();
        let kh = kernels::gram(&KernelSpec::new(gh, xh.ncols()).unwrap(), xh, xh).unwrap();
        let kf = kernels::gram(&KernelSpec::new(gf, xf.ncols()).unwrap(), xf, xf).unwrap();
        let half = linalg::psd_sqrt(&kf);
        let inner = (&kf * (xi / n as f64) + DMatrix::identity(n, n)).try_inverse().unwrap();
        let m = &half * inner * &half;
        let a = &kh * &m * &kh + &kh * (4.0 * lam);
        let p = a.clone().pseudo_inverse(linalg::pinv_tolerance(n, n, a.norm())).unwrap();
        p * &kh * &m * y
    }

    #[test]
    fn zero_outcome_gives_zero_bridge() {
        let xh = normal(6, 2, 1);
        let xf = normal(6, 2, 2);
        let y = DVector::zeros(6);
        let k = KernelSpec::new(0.5, 2).unwrap();
        for opts in [SolveOptions::exact(), SolveOptions::nystrom(3)] {
            let f = solve_outcome_bridge(&xh, &xf, &y, &k, &k, 2.0, 0.1, &opts).unwrap();
            assert!(f.coefficients.iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn outcome_solve_matches_dense_oracle() {
        let xh = normal(4, 2, 5);
        let xf = normal(4, 2, 6);
        let y = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3]);
        let (kh, kf) = (KernelSpec::new(0.7, 2).unwrap(), KernelSpec::new(0.4, 2).unwrap());
        let got = solve_outcome_bridge(&xh, &xf, &y, &kh, &kf, 3.0, 0.05, &SolveOptions::exact()).unwrap();
        let want = dense_h(&xh, &xf, &y, 0.7, 0.4, 3.0, 0.05);
        assert_relative_eq!(got.coefficients, want, max_relative = 1e-8, epsilon = 1e-10);
    }

    #[test]
    fn outcome_solution_scales_with_y() {
        let xh = normal(10, 2, 7);
        let xf = normal(10, 2, 8);
        let y = normal(10, 1, 9).column(0).into_owned();
        let k = KernelSpec::new(0.5, 2).unwrap();
        let f = solve_outcome_bridge(&xh, &xf, &y, &k, &k, 2.0, 0.01, &SolveOptions::exact()).unwrap();
        let g = solve_outcome_bridge(&xh, &xf, &(&y * 3.5), &k, &k, 2.0, 0.01, &SolveOptions::exact()).unwrap();
        assert_relative_eq!(g.coefficients, f.coefficients * 3.5, max_relative = 1e-9, epsilon = 1e-12);
    }

    #[test]
    fn outcome_solution_is_stationary() {
        let n = 12;
        let xh = normal(n, 2, 17);
        let xf = normal(n, 2, 18);
        let y = normal(n, 1, 19).column(0).into_owned();
        let (k, lam, xi) = (KernelSpec::new(0.5, 2).unwrap(), 0.02, 2.0);
        let f = solve_outcome_bridge(&xh, &xf, &y, &k, &k, xi, lam, &SolveOptions::exact()).unwrap();
        let kh = kernels::gram_sym(&k, &xh).unwrap();
        let m = match MomentMetric::exact(&kernels::gram_sym(&k, &xf).unwrap(), xi / n as f64) {
            MomentMetric::Dense(m) => m,
            _ => unreachable!(),
        };
        let obj = |a: &DVector<f64>| {
            let r = &y - &kh * a;
            r.dot(&(&m * &r)) + 4.0 * lam * a.dot(&(&kh * a))
        };
        let base = obj(&f.coefficients);
        let mut r = rng::stream(4, 4);
        for _ in 0..50 {
            let dir = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
            let d = dir.normalize() * 1e-4;
            assert!(obj(&(&f.coefficients + &d)) >= base - 1e-9);
            assert!(obj(&(&f.coefficients - &d)) >= base - 1e-9);
        }
    }

    #[test]
    fn treatment_requires_the_arm() {
        let x = normal(5, 2, 1);
        let k = KernelSpec::new(1.0, 2).unwrap();
        let arms = vec![Arm::Control; 5];
        let err = solve_treatment_bridge(&x, &x, &arms, Arm::Treated, &k, &k, 1.0, 1.0, &SolveOptions::exact());
        assert!(matches!(err, Err(Error::DegenerateData(_))));
    }

    #[test]
    fn treatment_with_far_points_approaches_constant_ridge() {
        // far-apart rows make every Gram the identity: q solves a scalar ridge per row
        let n = 4;
        let x = DMatrix::from_fn(n, 1, |i, _| 100.0 * i as f64);
        let k = KernelSpec::new(1.0, 1).unwrap();
        let arms = vec![Arm::Treated; n];
        let (zeta, mu) = (2.0, 0.01);
        let f = solve_treatment_bridge(&x, &x, &arms, Arm::Treated, &k, &k, zeta, mu, &SolveOptions::exact()).unwrap();
        let m = 1.0 / (zeta / n as f64 + 1.0);
        let want = m / (m + 4.0 * mu);
        for c in f.coefficients.iter() {
            assert_relative_eq!(*c, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn treatment_is_permutation_invariant() {
        let n = 10;
        let xq = normal(n, 2, 31);
        let xg = normal(n, 2, 32);
        let arms: Vec<Arm> = (0..n).map(|i| if i % 3 == 0 { Arm::Control } else { Arm::Treated }).collect();
        let k = KernelSpec::new(0.6, 2).unwrap();
        let f = solve_treatment_bridge(&xq, &xg, &arms, Arm::Treated, &k, &k, 2.0, 0.01, &SolveOptions::exact()).unwrap();
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 5, 2, 8, 4, 6];
        let arms_p: Vec<Arm> = perm.iter().map(|&i| arms[i]).collect();
        let g = solve_treatment_bridge(&xq.select_rows(&perm), &xg.select_rows(&perm), &arms_p, Arm::Treated, &k, &k, 2.0, 0.01, &SolveOptions::exact()).unwrap();
        for (p, &i) in perm.iter().enumerate() {
            assert_relative_eq!(g.coefficients[p], f.coefficients[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn low_rank_metric_matches_dense_at_full_rank() {
        let x = normal(15, 2, 3);
        let k = KernelSpec::new(0.5, 2).unwrap();
        let g = kernels::gram_sym(&k, &x).unwrap();
        let dense = MomentMetric::exact(&g, 0.3);
        let map = NystromMap::fit(&k, &x, 15, 0).unwrap();
        let low = MomentMetric::low_rank(&map.features(&x).unwrap(), 0.3);
        let r = normal(15, 1, 4).column(0).into_owned();
        assert_relative_eq!(dense.quad_form(&r), low.quad_form(&r), max_relative = 1e-6);
    }

    #[test]
    fn tiny_arm_is_a_degenerate_fold() {
        let x = normal(6, 2, 1);
        let y = DVector::from_element(6, 1.0);
        let err = tune_outcome_bridge(&x, &x, &y, &BridgeTuning::default(), 0);
        assert!(matches!(err, Err(Error::DegenerateFold(_))));
    }

    #[test]
    fn single_cell_tuning_equals_direct_solve() {
        let n = 40;
        let xh = normal(n, 2, 41);
        let xf = normal(n, 2, 42);
        let y = normal(n, 1, 43).column(0).into_owned();
        let tuning = BridgeTuning {
            s_grid: vec![2.0],
            gamma_quantiles: vec![0.5],
            solver: BridgeSolver::Exact,
            ..Default::default()
        };
        let (fit, report) = tune_outcome_bridge(&xh, &xf, &y, &tuning, 7).unwrap();
        // keep the penalty arithmetic at run time; constant folding can differ by an ulp
        let n = std::hint::black_box(n);
        let kh = KernelSpec::new(kernels::median_bandwidth(&xh, None).unwrap(), 2).unwrap();
        let kf = KernelSpec::new(kernels::median_bandwidth(&xf, None).unwrap(), 2).unwrap();
        let direct = solve_outcome_bridge(&xh, &xf, &y, &kh, &kf, default_moment_weight(n), default_penalty_product(2.0, n), &SolveOptions::exact()).unwrap();
        assert_eq!(report.best_gamma, kh.gamma);
        assert_relative_eq!(fit.coefficients, direct.coefficients, epsilon = 1e-12);
    }

    #[test]
    fn defaults_follow_the_scale_rule() {
        let n = 1000;
        let s = 5.0 / 1000f64.powf(0.4);
        assert_relative_eq!(default_moment_weight(n), 1.0 / (s * s), epsilon = 1e-12);
        assert_relative_eq!(default_penalty_product(2.0, n), s.powi(4), epsilon = 1e-15);
    }
}
