//! Outcome, treatment, maximum and doubly robust proximal learners.
//!
//! Training weights use the outcome standardized by the full-table mean and
//! scale; cross-validated values are reported in the original units, so the
//! two branches of the maximum learner compare like with like.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{fit_kernel_on_features, fit_linear};
use super::surrogate::SurrogateLoss;
use super::{DecisionFunction, FeatureSet, FunctionClass, Policy, PolicyTuning};
use crate::bridges::{treatment_at_observed, BridgeFitter, OutcomeModel, TreatmentModel};
use crate::data::{Arm, ColumnScaling, SampleTable, ScalarScaling};
use crate::error::{Error, Result};
use crate::folds::FoldPlan;
use crate::kernels::{self, KernelSpec, NystromMap};
use crate::rng;

const BANDWIDTH_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Outcome,
    Treatment,
    Maximum,
    DoublyRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Outcome,
    Treatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerReport {
    pub learner: LearnerKind,
    pub features: FeatureSet,
    pub rho_grid: Vec<f64>,
    /// Cross-validated value per rho, in outcome units.
    pub cv_values: Vec<f64>,
    pub best_rho: f64,
    pub best_cv_value: f64,
    /// Classifier bandwidth for the kernel class.
    pub kernel_gamma: Option<f64>,
    /// Set by the maximum learner.
    pub winner: Option<Branch>,
    pub branches: Vec<LearnerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub policy: Policy,
    pub report: LearnerReport,
}

/// Labels `sign(b)` (with `sign(0) = +1`) and weights `|b|`.
fn signed(b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (b.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect(), b.iter().map(|v| v.abs()).collect())
}

/// HSIC-selected bandwidth over inverse quantiles of the pairwise distances;
/// falls back to the median heuristic when the weighted problem has a single
/// class or no mass.
fn classifier_bandwidth(x: &DMatrix<f64>, labels: &[f64], weights: &[f64], cap: usize) -> Result<f64> {
    let rows = kernels::thin_rows(x.nrows(), cap).unwrap_or_else(|| (0..x.nrows()).collect());
    let xs = x.select_rows(&rows);
    let ls: Vec<f64> = rows.iter().map(|&i| labels[i]).collect();
    let mut ws: Vec<f64> = rows.iter().map(|&i| weights[i]).collect();
    let total: f64 = ws.iter().sum();
    let has = |c: f64| ls.iter().zip(&ws).any(|(&l, &w)| l == c && w > 0.0);
    if !(total > 0.0) || !has(1.0) || !has(-1.0) {
        return kernels::median_bandwidth(&xs, None);
    }
    ws.iter_mut().for_each(|w| *w /= total);
    let candidates = kernels::quantile_bandwidths(&xs, None, &BANDWIDTH_QUANTILES)?;
    if candidates.is_empty() {
        return kernels::median_bandwidth(&xs, None);
    }
    kernels::hsic_bandwidth(&xs, &ls, &ws, &candidates)
}

/// Training design of one fit, reused across the rho grid.
enum Basis {
    Linear(DMatrix<f64>),
    Kernel { map: NystromMap, phi: DMatrix<f64> },
}

impl Basis {
    /// `x` holds the training rows; kernel landmarks are drawn from
    /// `landmark_source` (the distinct rows behind `x`).
    fn new(x: &DMatrix<f64>, landmark_source: &DMatrix<f64>, tuning: &PolicyTuning, gamma: Option<f64>, seed: u64) -> Result<Self> {
        match (tuning.class, gamma) {
            (FunctionClass::Kernel { rank }, Some(gamma)) => {
                let n = landmark_source.nrows();
                let m = rank.unwrap_or_else(|| kernels::default_landmark_count(n)).min(n);
                let map = NystromMap::fit(&KernelSpec::new(gamma, x.ncols())?, landmark_source, m, seed)?;
                let phi = map.features(x)?;
                Ok(Basis::Kernel { map, phi })
            }
            _ => Ok(Basis::Linear(x.clone())),
        }
    }

    fn fit(&self, labels: &[f64], weights: &[f64], loss: SurrogateLoss, rho: f64) -> Result<DecisionFunction> {
        match self {
            Basis::Linear(x) => {
                let fit = fit_linear(x, labels, weights, loss, rho, true)?;
                if !fit.converged {
                    log::warn!("classifier stopped after {} iterations without converging", fit.iterations);
                }
                Ok(DecisionFunction::Linear { weights: fit.weights, intercept: fit.intercept })
            }
            Basis::Kernel { map, phi } => Ok(fit_kernel_on_features(map, phi, labels, weights, loss, rho)?.0),
        }
    }
}

fn check_tuning(tuning: &PolicyTuning) -> Result<()> {
    tuning.validate()?;
    if tuning.rho_grid.is_empty() {
        return Err(Error::InvalidArgument("empty rho grid".into()));
    }
    Ok(())
}

/// Fold-averaged values, then the best rho; ties go to the smallest rho.
fn select_rho(grid: &[f64], per_fold: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let k = per_fold.len() as f64;
    let avg: Vec<f64> = (0..grid.len()).map(|j| per_fold.iter().map(|f| f[j]).sum::<f64>() / k).collect();
    let mut best = 0;
    for j in 1..grid.len() {
        if avg[j] > avg[best] || (avg[j] == avg[best] && grid[j] < grid[best]) {
            best = j;
        }
    }
    (avg, best)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

fn scaled_features(data: &SampleTable, features: FeatureSet) -> (ColumnScaling, DMatrix<f64>) {
    let raw = features.select(data);
    let scaling = ColumnScaling::fit(&raw);
    let x = scaling.apply(&raw);
    (scaling, x)
}

/// `(h(W, +1, L) - h(W, -1, L)) / scale` per row.
fn contrast(h: &dyn OutcomeModel, data: &SampleTable, scale: f64) -> Result<Vec<f64>> {
    let p = h.outcome_bridge(data, Arm::Treated)?;
    let m = h.outcome_bridge(data, Arm::Control)?;
    Ok((0..data.n()).map(|i| (p[i] - m[i]) / scale).collect())
}

/// Outcome learner: weights `|Δ|` and labels `sign(Δ)` for the bridge
/// contrast `Δ = h(W, +1, L) - h(W, -1, L)`, on features `L` or `L,Z`.
pub fn learn_outcome(
    data: &SampleTable,
    fitter: &dyn BridgeFitter,
    tuning: &PolicyTuning,
    features: FeatureSet,
) -> Result<LearnedPolicy> {
    check_tuning(tuning)?;
    if features.reads_w() {
        return Err(Error::ContractViolation("outcome-learned rules may not read W".into()));
    }
    let seed = tuning.seed;
    let y_scale = ScalarScaling::fit(data.y()).scale;
    let (scaling, x) = scaled_features(data, features);
    let plan = FoldPlan::stratified(data.a(), tuning.folds, rng::derive(seed, 0xcf))?;

    let h_full = fitter.fit_outcome(data, rng::derive(seed, 0x40))?;
    let (labels, weights) = signed(&contrast(h_full.as_ref(), data, y_scale)?);
    let gamma = match tuning.class {
        FunctionClass::Kernel { .. } => Some(classifier_bandwidth(&x, &labels, &weights, tuning.bandwidth_rows)?),
        FunctionClass::Linear => None,
    };

    let per_fold = (0..plan.k)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let (train, test) = (plan.train_rows(k), plan.test_rows(k));
            let tr = data.subset(&train);
            let te = data.subset(&test);
            let h = fitter.fit_outcome(&tr, rng::derive(seed, 0x41 + k as u64))?;
            let (l, w) = signed(&contrast(h.as_ref(), &tr, y_scale)?);
            let xtr = x.select_rows(&train);
            let basis = Basis::new(&xtr, &xtr, tuning, gamma, rng::derive(seed, 0x51 + k as u64))?;
            let hp = h.outcome_bridge(&te, Arm::Treated)?;
            let hm = h.outcome_bridge(&te, Arm::Control)?;
            let xte = x.select_rows(&test);
            tuning
                .rho_grid
                .iter()
                .map(|&rho| {
                    let s = basis.fit(&l, &w, tuning.loss, rho)?.scores(&xte)?;
                    Ok(mean((0..test.len()).map(|i| if s[i] >= 0.0 { hp[i] } else { hm[i] })))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let (cv_values, best) = select_rho(&tuning.rho_grid, &per_fold);

    let basis = Basis::new(&x, &x, tuning, gamma, rng::derive(seed, 0x50))?;
    let decision = basis.fit(&labels, &weights, tuning.loss, tuning.rho_grid[best])?;
    Ok(LearnedPolicy {
        policy: Policy { features, scaling, decision },
        report: LearnerReport {
            learner: LearnerKind::Outcome,
            features,
            rho_grid: tuning.rho_grid.clone(),
            best_rho: tuning.rho_grid[best],
            best_cv_value: cv_values[best],
            cv_values,
            kernel_gamma: gamma,
            winner: None,
            branches: Vec::new(),
        },
    })
}

/// `b_i = Y'_i q(Z_i, A_i, L_i)` with the standardized outcome `Y'`.
fn treatment_signal(q: &dyn TreatmentModel, data: &SampleTable, y: &ScalarScaling) -> Result<(Vec<f64>, Vec<f64>)> {
    let qa = treatment_at_observed(q, data)?;
    let b: Vec<f64> = (0..data.n()).map(|i| y.forward(data.y()[i]) * qa[i]).collect();
    let (sgn, weights) = signed(&b);
    let labels = (0..data.n()).map(|i| data.a()[i].sign() * sgn[i]).collect();
    Ok((labels, weights))
}

/// Treatment learner: weights `|Y q(Z, A, L)|` and labels
/// `A sign(Y q(Z, A, L))`, on features `L` or `L,W`.
pub fn learn_treatment(
    data: &SampleTable,
    fitter: &dyn BridgeFitter,
    tuning: &PolicyTuning,
    features: FeatureSet,
) -> Result<LearnedPolicy> {
    check_tuning(tuning)?;
    if features.reads_z() {
        return Err(Error::ContractViolation("treatment-learned rules may not read Z".into()));
    }
    let seed = tuning.seed;
    let y = ScalarScaling::fit(data.y());
    let (scaling, x) = scaled_features(data, features);
    let plan = FoldPlan::stratified(data.a(), tuning.folds, rng::derive(seed, 0xcf))?;

    let q_full = fitter.fit_treatment(data, rng::derive(seed, 0x60))?;
    let (labels, weights) = treatment_signal(q_full.as_ref(), data, &y)?;
    let gamma = match tuning.class {
        FunctionClass::Kernel { .. } => Some(classifier_bandwidth(&x, &labels, &weights, tuning.bandwidth_rows)?),
        FunctionClass::Linear => None,
    };

    let per_fold = (0..plan.k)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let (train, test) = (plan.train_rows(k), plan.test_rows(k));
            let tr = data.subset(&train);
            let te = data.subset(&test);
            let q = fitter.fit_treatment(&tr, rng::derive(seed, 0x61 + k as u64))?;
            let (l, w) = treatment_signal(q.as_ref(), &tr, &y)?;
            let xtr = x.select_rows(&train);
            let basis = Basis::new(&xtr, &xtr, tuning, gamma, rng::derive(seed, 0x71 + k as u64))?;
            let qa = treatment_at_observed(q.as_ref(), &te)?;
            let xte = x.select_rows(&test);
            tuning
                .rho_grid
                .iter()
                .map(|&rho| {
                    let s = basis.fit(&l, &w, tuning.loss, rho)?.scores(&xte)?;
                    Ok(mean((0..test.len()).map(|i| {
                        if Arm::from_score(s[i]) == te.a()[i] {
                            te.y()[i] * qa[i]
                        } else {
                            0.0
                        }
                    })))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let (cv_values, best) = select_rho(&tuning.rho_grid, &per_fold);

    let basis = Basis::new(&x, &x, tuning, gamma, rng::derive(seed, 0x70))?;
    let decision = basis.fit(&labels, &weights, tuning.loss, tuning.rho_grid[best])?;
    Ok(LearnedPolicy {
        policy: Policy { features, scaling, decision },
        report: LearnerReport {
            learner: LearnerKind::Treatment,
            features,
            rho_grid: tuning.rho_grid.clone(),
            best_rho: tuning.rho_grid[best],
            best_cv_value: cv_values[best],
            cv_values,
            kernel_gamma: gamma,
            winner: None,
            branches: Vec::new(),
        },
    })
}

/// Runs the outcome learner on `L,Z` and the treatment learner on `L,W` and
/// keeps the one with the larger cross-validated value; the outcome branch
/// wins ties. A branch with an empty rho grid is skipped.
pub fn learn_maximum(
    data: &SampleTable,
    fitter: &dyn BridgeFitter,
    outcome_tuning: &PolicyTuning,
    treatment_tuning: &PolicyTuning,
) -> Result<LearnedPolicy> {
    let outcome = if outcome_tuning.rho_grid.is_empty() {
        None
    } else {
        Some(learn_outcome(data, fitter, outcome_tuning, FeatureSet::LZ)?)
    };
    let treatment = if treatment_tuning.rho_grid.is_empty() {
        None
    } else {
        Some(learn_treatment(data, fitter, treatment_tuning, FeatureSet::LW)?)
    };
    let (winner, branch, loser) = match (outcome, treatment) {
        (None, None) => return Err(Error::InvalidArgument("both branches of the maximum learner are disabled".into())),
        (Some(o), None) => (o, Branch::Outcome, None),
        (None, Some(t)) => (t, Branch::Treatment, None),
        (Some(o), Some(t)) => {
            if o.report.best_cv_value >= t.report.best_cv_value {
                (o, Branch::Outcome, Some(t))
            } else {
                (t, Branch::Treatment, Some(o))
            }
        }
    };
    let mut branches = vec![winner.report.clone()];
    branches.extend(loser.map(|l| l.report));
    if branch == Branch::Treatment {
        branches.reverse();
    }
    let report = LearnerReport {
        learner: LearnerKind::Maximum,
        winner: Some(branch),
        branches,
        ..winner.report.clone()
    };
    Ok(LearnedPolicy { policy: winner.policy, report })
}

/// Doubly robust weights
/// `C_a = 1(A = a) q(Z, a, L) (Y - h(W, a, L)) + h(W, a, L)` for both arms.
pub fn dr_weights(
    data: &SampleTable,
    h: &dyn OutcomeModel,
    q: &dyn TreatmentModel,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut out = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let hv = h.outcome_bridge(data, arm)?;
        let qv = q.treatment_bridge(data, arm)?;
        let mut c = DVector::zeros(data.n());
        for i in 0..data.n() {
            let aug = if data.a()[i] == arm { qv[i] * (data.y()[i] - hv[i]) } else { 0.0 };
            c[i] = aug + hv[i];
            if !c[i].is_finite() {
                return Err(Error::NumericOverflow { row: i, what: format!("doubly robust weight for arm {arm:?}") });
            }
        }
        out.push(c);
    }
    let control = out.pop().unwrap();
    Ok((out.pop().unwrap(), control))
}

/// The `2n`-row classification problem of the doubly robust learner: row
/// `i` with label `sign(C_+)` and weight `2|C_+|`, row `n + i` with label
/// `-sign(C_-)` and weight `2|C_-|`. The factor 2 keeps the data term on the
/// `1/n` scale.
pub fn dr_classification_problem(c_plus: &[f64], c_minus: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (lp, wp) = signed(c_plus);
    let (lm, wm) = signed(c_minus);
    let labels = lp.into_iter().chain(lm.into_iter().map(|l| -l)).collect();
    let weights = wp.into_iter().chain(wm).map(|w| 2.0 * w).collect();
    (labels, weights)
}

/// Surrogate objective of the doubly robust learner for rule scores
/// `r(L_i)` and squared penalty norm `norm2`:
/// `(1/n) sum_i sum_a |C_a| phi(a sign(C_a) r(L_i)) + rho norm2`.
pub fn dr_objective(scores: &[f64], c_plus: &[f64], c_minus: &[f64], loss: SurrogateLoss, rho: f64, norm2: f64) -> f64 {
    let n = scores.len() as f64;
    let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
    let data: f64 = (0..scores.len())
        .map(|i| {
            c_plus[i].abs() * loss.value(sgn(c_plus[i]) * scores[i])
                + c_minus[i].abs() * loss.value(-sgn(c_minus[i]) * scores[i])
        })
        .sum();
    data / n + rho * norm2
}

/// Standardized doubly robust problem on `rows`, using bridges `h`, `q`.
fn dr_training(data: &SampleTable, h: &dyn OutcomeModel, q: &dyn TreatmentModel, y: &ScalarScaling) -> Result<(Vec<f64>, Vec<f64>)> {
    let (cp, cm) = dr_weights(data, h, q)?;
    let f = |c: &DVector<f64>| c.iter().map(|&v| (v - y.mean) / y.scale).collect::<Vec<f64>>();
    Ok(dr_classification_problem(&f(&cp), &f(&cm)))
}

fn doubled(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(2 * x.nrows(), x.ncols());
    out.rows_mut(0, x.nrows()).copy_from(x);
    out.rows_mut(x.nrows(), x.nrows()).copy_from(x);
    out
}

/// Doubly robust learner with nested cross-fitting, on features `L`.
///
/// For each outer fold `k` and inner fold `κ` of the remaining rows, bridges
/// are fitted on the inner fold and the rule on the other inner folds; the
/// `κ` rules are averaged and scored on fold `k` by the doubly robust value
/// with weights averaged over the `κ` bridge fits. The final rule averages
/// `K` rules, each trained on `I^(-k)` with bridges fitted on `I^(k)`.
pub fn learn_dr(data: &SampleTable, fitter: &dyn BridgeFitter, tuning: &PolicyTuning) -> Result<LearnedPolicy> {
    check_tuning(tuning)?;
    let k_folds = tuning.folds;
    if data.n() < k_folds * k_folds {
        return Err(Error::DegenerateFold(format!(
            "{} rows cannot fill {k_folds} x {k_folds} nested folds",
            data.n()
        )));
    }
    let seed = tuning.seed;
    let y = ScalarScaling::fit(data.y());
    let (scaling, x) = scaled_features(data, FeatureSet::L);
    let plan = FoldPlan::stratified(data.a(), k_folds, rng::derive(seed, 0xd0))?;

    let gamma = match tuning.class {
        FunctionClass::Kernel { .. } => {
            let h = fitter.fit_outcome(data, rng::derive(seed, 0xd1))?;
            let q = fitter.fit_treatment(data, rng::derive(seed, 0xd2))?;
            let (l, w) = dr_training(data, h.as_ref(), q.as_ref(), &y)?;
            Some(classifier_bandwidth(&doubled(&x), &l, &w, tuning.bandwidth_rows)?)
        }
        FunctionClass::Linear => None,
    };

    let per_fold = (0..k_folds)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let (train, test) = (plan.train_rows(k), plan.test_rows(k));
            let te = data.subset(&test);
            let xte = x.select_rows(&test);
            let arms: Vec<Arm> = train.iter().map(|&i| data.a()[i]).collect();
            let inner = FoldPlan::stratified(&arms, k_folds, rng::derive(seed, 0xd3 + k as u64))?;
            struct Inner {
                basis: Basis,
                labels: Vec<f64>,
                weights: Vec<f64>,
                c_plus: DVector<f64>,
                c_minus: DVector<f64>,
            }
            let parts = (0..k_folds)
                .into_par_iter()
                .map(|kappa| -> Result<Inner> {
                    let bridge_rows: Vec<usize> = inner.test_rows(kappa).into_iter().map(|j| train[j]).collect();
                    let weight_rows: Vec<usize> = inner.train_rows(kappa).into_iter().map(|j| train[j]).collect();
                    let tag = (k * k_folds + kappa) as u64;
                    let bridge_data = data.subset(&bridge_rows);
                    let h = fitter.fit_outcome(&bridge_data, rng::derive(seed, 0x1000 + tag))?;
                    let q = fitter.fit_treatment(&bridge_data, rng::derive(seed, 0x2000 + tag))?;
                    let (labels, weights) = dr_training(&data.subset(&weight_rows), h.as_ref(), q.as_ref(), &y)?;
                    let (c_plus, c_minus) = dr_weights(&te, h.as_ref(), q.as_ref())?;
                    let xw = x.select_rows(&weight_rows);
                    let basis = Basis::new(&doubled(&xw), &xw, tuning, gamma, rng::derive(seed, 0x3000 + tag))?;
                    Ok(Inner { basis, labels, weights, c_plus, c_minus })
                })
                .collect::<Result<Vec<_>>>()?;
            let kf = k_folds as f64;
            let c_plus = parts.iter().fold(DVector::zeros(test.len()), |acc, p| acc + &p.c_plus) / kf;
            let c_minus = parts.iter().fold(DVector::zeros(test.len()), |acc, p| acc + &p.c_minus) / kf;
            tuning
                .rho_grid
                .iter()
                .map(|&rho| {
                    let mut s = DVector::zeros(test.len());
                    for p in &parts {
                        s += p.basis.fit(&p.labels, &p.weights, tuning.loss, rho)?.scores(&xte)?;
                    }
                    Ok(mean((0..test.len()).map(|i| if s[i] >= 0.0 { c_plus[i] } else { c_minus[i] })))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let (cv_values, best) = select_rho(&tuning.rho_grid, &per_fold);
    let rho = tuning.rho_grid[best];

    let members = (0..k_folds)
        .into_par_iter()
        .map(|k| -> Result<DecisionFunction> {
            let (train, test) = (plan.train_rows(k), plan.test_rows(k));
            let bridge_data = data.subset(&test);
            let h = fitter.fit_outcome(&bridge_data, rng::derive(seed, 0x4000 + k as u64))?;
            let q = fitter.fit_treatment(&bridge_data, rng::derive(seed, 0x5000 + k as u64))?;
            let (labels, weights) = dr_training(&data.subset(&train), h.as_ref(), q.as_ref(), &y)?;
            let xw = x.select_rows(&train);
            let basis = Basis::new(&doubled(&xw), &xw, tuning, gamma, rng::derive(seed, 0x6000 + k as u64))?;
            basis.fit(&labels, &weights, tuning.loss, rho)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LearnedPolicy {
        policy: Policy { features: FeatureSet::L, scaling, decision: DecisionFunction::Aggregate(members) },
        report: LearnerReport {
            learner: LearnerKind::DoublyRobust,
            features: FeatureSet::L,
            rho_grid: tuning.rho_grid.clone(),
            best_rho: rho,
            best_cv_value: cv_values[best],
            cv_values,
            kernel_gamma: gamma,
            winner: None,
            branches: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridges::{constant_bridge, FixedBridges, FnBridge};
    use crate::policy::classifier::{fit_weighted_classifier, ClassSpec};
    use crate::policy::{log_grid, Rule};
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn table(n: usize, seed: u64) -> SampleTable {
        let mut r = rng::stream(seed, 9);
        let mut g = || r.sample::<f64, _>(StandardNormal);
        let l = DMatrix::from_fn(n, 2, |_, _| g());
        let z = DMatrix::from_fn(n, 1, |_, _| g());
        let w = DMatrix::from_fn(n, 1, |_, _| g());
        let a = (0..n).map(|i| if (i * 7 + 3) % 5 < 2 { Arm::Treated } else { Arm::Control }).collect();
        let y = DVector::from_fn(n, |i, _| 1.0 + l[(i, 0)] * w[(i, 0)] + 0.3 * g());
        SampleTable::new(l, z, w, a, y).unwrap()
    }

    fn fixed<O: OutcomeModel + 'static, T: TreatmentModel + 'static>(h: O, q: T) -> FixedBridges {
        FixedBridges { outcome: Arc::new(h), treatment: Arc::new(q) }
    }

    fn small_tuning() -> PolicyTuning {
        PolicyTuning { rho_grid: log_grid(1e-3, 1.0, 3), folds: 3, ..Default::default() }
    }

    #[test]
    fn dr_weights_hand_row() {
        let t = SampleTable::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            vec![Arm::Treated],
            DVector::from_vec(vec![2.0]),
        )
        .unwrap();
        let (cp, cm) = dr_weights(&t, &constant_bridge(0.5, 0.25), &constant_bridge(1.5, 3.0)).unwrap();
        assert!((cp[0] - 2.75).abs() < 1e-15);
        assert_eq!(cm[0], 0.25);
    }

    #[test]
    fn dr_weights_degenerate_bridges() {
        let t = table(20, 1);
        let h = FnBridge(|d: &SampleTable, a: Arm| Ok(d.w().column(0).map(|v| v * a.sign())));
        let (cp, cm) = dr_weights(&t, &h, &constant_bridge(0.0, 0.0)).unwrap();
        for i in 0..20 {
            assert_eq!(cp[i], t.w()[(i, 0)]);
            assert_eq!(cm[i], -t.w()[(i, 0)]);
        }
        let (cp, cm) = dr_weights(&t, &constant_bridge(0.0, 0.0), &constant_bridge(2.0, 3.0)).unwrap();
        for i in 0..20 {
            let treated = t.a()[i].is_treated();
            assert_eq!(cp[i], if treated { 2.0 * t.y()[i] } else { 0.0 });
            assert_eq!(cm[i], if treated { 0.0 } else { 3.0 * t.y()[i] });
        }
    }

    #[test]
    fn dr_weights_name_bad_row() {
        let t = table(6, 2);
        let q = FnBridge(|d: &SampleTable, _| Ok(DVector::from_fn(d.n(), |i, _| if i == 4 { f64::INFINITY } else { 1.0 })));
        match dr_weights(&t, &constant_bridge(0.0, 0.0), &q) {
            Err(Error::NumericOverflow { row, .. }) => assert_eq!(row, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_contrast_treats_everyone() {
        let t = table(60, 3);
        let f = fixed(constant_bridge(3.0, 1.0), constant_bridge(1.0, 1.0));
        let p = learn_outcome(&t, &f, &small_tuning(), FeatureSet::LZ).unwrap();
        assert!(p.policy.decide(&t).unwrap().iter().all(|a| a.is_treated()));
        let kernel = PolicyTuning { class: FunctionClass::Kernel { rank: Some(10) }, ..small_tuning() };
        let p = learn_outcome(&t, &f, &kernel, FeatureSet::L).unwrap();
        assert!(p.policy.decide(&t).unwrap().iter().all(|a| a.is_treated()));
    }

    #[test]
    fn zero_treatment_bridge_treats_everyone() {
        let t = table(60, 4);
        let f = fixed(constant_bridge(0.0, 0.0), constant_bridge(0.0, 0.0));
        let p = learn_treatment(&t, &f, &small_tuning(), FeatureSet::LW).unwrap();
        assert!(p.policy.decide(&t).unwrap().iter().all(|a| a.is_treated()));
    }

    #[test]
    fn treatment_cv_value_of_constant_rule() {
        let mut t = table(90, 5);
        t = SampleTable::new(t.l().clone(), t.z().clone(), t.w().clone(), t.a().to_vec(), DVector::from_element(90, 1.0)).unwrap();
        let f = fixed(constant_bridge(0.0, 0.0), constant_bridge(2.0, 2.0));
        let p = learn_treatment(&t, &f, &small_tuning(), FeatureSet::LW).unwrap();
        // Y'=0 gives zero weights, so every fold rule is the constant +1
        let share = t.arm_count(Arm::Treated) as f64 / 90.0;
        for v in &p.report.cv_values {
            assert!((v - 2.0 * share).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn contract_on_features() {
        let t = table(30, 6);
        let f = fixed(constant_bridge(1.0, 0.0), constant_bridge(1.0, 1.0));
        assert!(matches!(learn_outcome(&t, &f, &small_tuning(), FeatureSet::LW), Err(Error::ContractViolation(_))));
        assert!(matches!(learn_treatment(&t, &f, &small_tuning(), FeatureSet::LZ), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn maximum_branches() {
        let t = table(60, 7);
        let f = fixed(constant_bridge(3.0, 1.0), constant_bridge(1.0, 1.0));
        let off = PolicyTuning { rho_grid: vec![], ..small_tuning() };
        let m = learn_maximum(&t, &f, &small_tuning(), &off).unwrap();
        let o = learn_outcome(&t, &f, &small_tuning(), FeatureSet::LZ).unwrap();
        assert_eq!(m.report.winner, Some(Branch::Outcome));
        assert_eq!(m.policy, o.policy);
        assert!(learn_maximum(&t, &f, &off, &off).is_err());

        let full = learn_maximum(&t, &f, &small_tuning(), &small_tuning()).unwrap();
        let tr = learn_treatment(&t, &f, &small_tuning(), FeatureSet::LW).unwrap();
        let best = o.report.best_cv_value.max(tr.report.best_cv_value);
        assert_eq!(full.report.best_cv_value, best);
        assert_eq!(full.report.branches.len(), 2);
    }

    #[test]
    fn maximum_tie_goes_to_outcome() {
        // constant outcome, everyone treated, q = 1: both branches value every rule at 2
        let t = table(60, 8);
        let t = SampleTable::new(t.l().clone(), t.z().clone(), t.w().clone(), vec![Arm::Treated; 60], DVector::from_element(60, 2.0))
            .unwrap();
        let f = fixed(constant_bridge(2.0, 2.0), constant_bridge(1.0, 1.0));
        let m = learn_maximum(&t, &f, &small_tuning(), &small_tuning()).unwrap();
        assert_eq!(m.report.branches[0].best_cv_value, m.report.branches[1].best_cv_value);
        assert_eq!(m.report.winner, Some(Branch::Outcome));
    }

    #[test]
    fn dr_program_matches_expanded_classifier() {
        let t = table(40, 10);
        let h = FnBridge(|d: &SampleTable, a: Arm| Ok(d.l().column(0).map(|v| v * a.sign() + 0.2)));
        let q = constant_bridge(2.0, 1.5);
        let (cp, cm) = dr_weights(&t, &h, &q).unwrap();
        let (labels, weights) = dr_classification_problem(cp.as_slice(), cm.as_slice());
        let x = doubled(t.l());
        let rho = 0.05;
        let (f, diag) =
            fit_weighted_classifier(&x, &labels, &weights, SurrogateLoss::SmoothHinge, rho, &ClassSpec::Linear, 0).unwrap();
        let scores = f.scores(t.l()).unwrap();
        let DecisionFunction::Linear { weights: beta, .. } = &f else { unreachable!() };
        let direct = dr_objective(scores.as_slice(), cp.as_slice(), cm.as_slice(), SurrogateLoss::SmoothHinge, rho, beta.norm_squared());
        assert!((direct - diag.objective).abs() < 1e-10, "{direct} vs {}", diag.objective);
    }

    #[test]
    fn dr_final_rule_averages_fold_rules() {
        let t = table(80, 11);
        let h = FnBridge(|d: &SampleTable, a: Arm| Ok(d.l().column(0).map(|v| v * a.sign())));
        let f = fixed(h, constant_bridge(0.0, 0.0));
        let tuning = PolicyTuning { rho_grid: vec![0.01], folds: 2, ..Default::default() };
        let p = learn_dr(&t, &f, &tuning).unwrap();
        let DecisionFunction::Aggregate(parts) = &p.policy.decision else { panic!() };
        assert_eq!(parts.len(), 2);
        let x = p.policy.scaling.apply(t.l());
        let whole = p.policy.decision.scores(&x).unwrap();
        let a = parts[0].scores(&x).unwrap();
        let b = parts[1].scores(&x).unwrap();
        for i in 0..80 {
            assert!((whole[i] - 0.5 * (a[i] + b[i])).abs() < 1e-14);
        }
        // with q = 0 the weights are the contrast 2 L1
        let d = p.policy.decide(&t).unwrap();
        let agree = (0..80).filter(|&i| d[i].is_treated() == (t.l()[(i, 0)] > 0.0)).count();
        assert!(agree >= 70, "{agree}");
    }

    #[test]
    fn dr_needs_nested_folds() {
        let t = table(20, 12);
        let f = fixed(constant_bridge(1.0, 0.0), constant_bridge(1.0, 1.0));
        assert!(learn_dr(&t, &f, &small_tuning()).is_ok());
        let five = PolicyTuning { folds: 5, ..small_tuning() };
        assert!(matches!(learn_dr(&t, &f, &five), Err(Error::DegenerateFold(_))));
    }

    #[test]
    fn cv_is_deterministic() {
        let t = table(70, 13);
        let h = FnBridge(|d: &SampleTable, a: Arm| Ok(d.l().column(1).map(|v| v * a.sign())));
        let f = fixed(h, constant_bridge(1.0, 1.0));
        let a = learn_outcome(&t, &f, &small_tuning(), FeatureSet::L).unwrap();
        let b = learn_outcome(&t, &f, &small_tuning(), FeatureSet::L).unwrap();
        assert_eq!(a, b);
    }

    /// Three-point discrete covariate with known weights: the surrogate
    /// minimizer over free per-point scores has the sign of the optimal
    /// assignment.
    #[test]
    fn fisher_consistency_three_points() {
        let mut r = rng::stream(77, 1);
        let mut checked = 0;
        while checked < 20 {
            let cp: Vec<f64> = (0..3).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
            let cm: Vec<f64> = (0..3).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
            if (0..3).any(|j| (cp[j] - cm[j]).abs() < 1e-3) {
                continue;
            }
            checked += 1;
            // one-hot features: per-point scores
            let x = doubled(&DMatrix::identity(3, 3));
            let (labels, weights) = dr_classification_problem(&cp, &cm);
            let fit = fit_linear(&x, &labels, &weights, SurrogateLoss::SmoothHinge, 1e-8, false).unwrap();
            let best = (0..8u32)
                .max_by(|&u, &v| {
                    let val = |m: u32| (0..3).map(|j| if m >> j & 1 == 1 { cp[j] } else { cm[j] }).sum::<f64>();
                    val(u).partial_cmp(&val(v)).unwrap()
                })
                .unwrap();
            for j in 0..3 {
                assert_eq!(fit.weights[j] >= 0.0, best >> j & 1 == 1, "{cp:?} {cm:?}");
            }
        }
    }
}
