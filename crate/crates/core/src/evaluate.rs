//! Value estimation for a fixed rule: the three identified functionals, the
//! doubly robust interval, and oracle evaluators for simulated data.

use serde::{Deserialize, Serialize};

use crate::bridges::{treatment_at_observed, OutcomeModel, TreatmentModel};
use crate::data::{Arm, SampleTable};
use crate::error::{Error, Result};
use crate::policy::learners::dr_weights;
use crate::policy::{FeatureSet, Rule};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Outcome,
    Treatment,
    DoublyRobust,
    OracleIpw,
    OracleNoiseFree,
    OraclePotentialMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub point: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub estimator: Estimator,
    pub n_used: usize,
}

impl ValueEstimate {
    fn point(point: f64, estimator: Estimator, n_used: usize) -> Self {
        Self { point, se: None, ci: None, estimator, n_used }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci.is_some_and(|(lo, hi)| lo <= value && value <= hi)
    }

    pub fn ci_length(&self) -> Option<f64> {
        self.ci.map(|(lo, hi)| hi - lo)
    }
}

/// Hidden simulation columns, aligned with the rows of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `Pr(A = +1 | U, L)`.
    pub prop_treated: Vec<f64>,
    /// `E(Y | W, U, A, Z, L)` at the observed arm.
    pub mu_y: Vec<f64>,
    /// `E(Y(+1) | U, L)` and `E(Y(-1) | U, L)`, when known.
    pub mu_treated: Option<Vec<f64>>,
    pub mu_control: Option<Vec<f64>>,
    /// Whether the table's outcome equals `mu_y` exactly.
    pub noise_free: bool,
}

fn require(rule: &dyn Rule, allowed: &[FeatureSet], what: &str) -> Result<()> {
    if allowed.contains(&rule.features()) {
        Ok(())
    } else {
        Err(Error::ContractViolation(format!(
            "{what} value needs a rule on {}, got one reading {}",
            allowed.iter().map(|f| f.name()).collect::<Vec<_>>().join(" or "),
            rule.features().name()
        )))
    }
}

fn decisions(rule: &dyn Rule, data: &SampleTable) -> Result<Vec<Arm>> {
    let d = rule.decide(data)?;
    if d.len() != data.n() {
        return Err(Error::ContractViolation(format!("rule returned {} decisions for {} rows", d.len(), data.n())));
    }
    Ok(d)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(1/n) sum_i h(W_i, d(L_i, Z_i), L_i)`.
pub fn value_outcome(data: &SampleTable, h: &dyn OutcomeModel, rule: &dyn Rule) -> Result<ValueEstimate> {
    require(rule, &[FeatureSet::L, FeatureSet::LZ], "outcome-bridge")?;
    let d = decisions(rule, data)?;
    let hp = h.outcome_bridge(data, Arm::Treated)?;
    let hm = h.outcome_bridge(data, Arm::Control)?;
    let v: Vec<f64> = (0..data.n()).map(|i| if d[i].is_treated() { hp[i] } else { hm[i] }).collect();
    Ok(ValueEstimate::point(mean(&v), Estimator::Outcome, data.n()))
}

/// `(1/n) sum_i Y_i q(Z_i, A_i, L_i) 1(d(L_i, W_i) = A_i)`.
pub fn value_treatment(data: &SampleTable, q: &dyn TreatmentModel, rule: &dyn Rule) -> Result<ValueEstimate> {
    require(rule, &[FeatureSet::L, FeatureSet::LW], "treatment-bridge")?;
    let d = decisions(rule, data)?;
    let qa = treatment_at_observed(q, data)?;
    let v: Vec<f64> = (0..data.n()).map(|i| if d[i] == data.a()[i] { data.y()[i] * qa[i] } else { 0.0 }).collect();
    Ok(ValueEstimate::point(mean(&v), Estimator::Treatment, data.n()))
}

/// Doubly robust value `(1/n) sum_i C_{d(L_i), i}` with the influence-based
/// standard error `sd(C_d) / sqrt(n)` and normal interval.
pub fn value_dr(
    data: &SampleTable,
    h: &dyn OutcomeModel,
    q: &dyn TreatmentModel,
    rule: &dyn Rule,
) -> Result<ValueEstimate> {
    require(rule, &[FeatureSet::L], "doubly robust")?;
    let d = decisions(rule, data)?;
    let (cp, cm) = dr_weights(data, h, q)?;
    let c: Vec<f64> = (0..data.n()).map(|i| if d[i].is_treated() { cp[i] } else { cm[i] }).collect();
    Ok(influence_estimate(&c, Estimator::DoublyRobust))
}

/// Mean of per-row contributions with `se = sd / sqrt(n)` (sample sd).
pub fn influence_estimate(c: &[f64], estimator: Estimator) -> ValueEstimate {
    let n = c.len();
    let point = mean(c);
    let var = if n > 1 { c.iter().map(|v| (v - point).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let se = (var / n as f64).sqrt();
    ValueEstimate { point, se: Some(se), ci: Some((point - Z_975 * se, point + Z_975 * se)), estimator, n_used: n }
}

fn check_truth(data: &SampleTable, truth: &GroundTruth) -> Result<()> {
    if truth.prop_treated.len() != data.n() || truth.mu_y.len() != data.n() {
        return Err(Error::ContractViolation(format!(
            "ground truth has {} propensities and {} means for {} rows",
            truth.prop_treated.len(),
            truth.mu_y.len(),
            data.n()
        )));
    }
    Ok(())
}

/// Inverse-propensity value with the true propensity:
/// `mean Y 1(A = d) / Pr(A | U, L)`. Any rule is allowed.
pub fn value_oracle_ipw(data: &SampleTable, truth: &GroundTruth, rule: &dyn Rule) -> Result<ValueEstimate> {
    check_truth(data, truth)?;
    let d = decisions(rule, data)?;
    Ok(ValueEstimate::point(ipw(data.y().as_slice(), data.a(), &truth.prop_treated, &d), Estimator::OracleIpw, data.n()))
}

fn ipw(y: &[f64], a: &[Arm], prop: &[f64], d: &[Arm]) -> f64 {
    let v: Vec<f64> = (0..y.len())
        .map(|i| {
            if d[i] != a[i] {
                0.0
            } else {
                let p = if a[i].is_treated() { prop[i] } else { 1.0 - prop[i] };
                y[i] / p
            }
        })
        .collect();
    mean(&v)
}

/// Inverse-propensity value on a noise-free test set, using the true
/// conditional means as outcomes.
pub fn value_oracle_noise_free(data: &SampleTable, truth: &GroundTruth, rule: &dyn Rule) -> Result<ValueEstimate> {
    check_truth(data, truth)?;
    if !truth.noise_free {
        return Err(Error::ContractViolation("noise-free oracle needs a noise-free test set".into()));
    }
    let d = decisions(rule, data)?;
    Ok(ValueEstimate::point(ipw(&truth.mu_y, data.a(), &truth.prop_treated, &d), Estimator::OracleNoiseFree, data.n()))
}

/// Oracle value from the potential-outcome means, `mean E(Y(d) | U, L)`,
/// for decisions computed elsewhere (they may use `U`).
pub fn value_potential_mean(truth: &GroundTruth, d: &[Arm]) -> Result<ValueEstimate> {
    let (Some(p), Some(m)) = (&truth.mu_treated, &truth.mu_control) else {
        return Err(Error::ContractViolation("ground truth lacks potential-outcome means".into()));
    };
    if p.len() != d.len() || m.len() != d.len() {
        return Err(Error::ContractViolation("decisions and ground truth differ in length".into()));
    }
    let v: Vec<f64> = (0..d.len()).map(|i| if d[i].is_treated() { p[i] } else { m[i] }).collect();
    Ok(ValueEstimate::point(mean(&v), Estimator::OraclePotentialMean, d.len()))
}

/// Noise-free IPW oracle for decisions computed elsewhere.
pub fn value_oracle_decisions(data: &SampleTable, truth: &GroundTruth, d: &[Arm]) -> Result<ValueEstimate> {
    check_truth(data, truth)?;
    if d.len() != data.n() {
        return Err(Error::ContractViolation("decisions and table differ in length".into()));
    }
    let estimator = if truth.noise_free { Estimator::OracleNoiseFree } else { Estimator::OracleIpw };
    let y: &[f64] = if truth.noise_free { &truth.mu_y } else { data.y().as_slice() };
    Ok(ValueEstimate::point(ipw(y, data.a(), &truth.prop_treated, d), estimator, data.n()))
}
