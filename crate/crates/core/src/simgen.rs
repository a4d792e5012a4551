//! Structural simulation with an unmeasured confounder `U`, scalar proxies
//! `Z` and `W`, two covariates and analytic bridges and optimal rules.
//!
//! ```text
//! L ~ N(0.25, 0.25^2 I_2)
//! Pr(A = 1 | L) = 1 / (1 + exp(b^T L))
//! (Z, W, U) | A, L ~ N(m(A, L), Sigma)
//! Y = E(Y | W, U, A, Z, L) + Uniform[-1, 1]
//! ```
//!
//! Extra uniform noise covariates can be appended to `L`; analytic functions
//! always read the first two columns.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridges::FnBridge;
use crate::data::{Arm, SampleTable};
use crate::error::{Error, Result};
use crate::evaluate::GroundTruth;
use crate::policy::{FeatureSet, FnRule};
use crate::rng;

/// Catalog entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioName {
    L1,
    L2,
    N1,
    N2,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [ScenarioName::L1, ScenarioName::L2, ScenarioName::N1, ScenarioName::N2];
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(ScenarioName::L1),
            "L2" => Ok(ScenarioName::L2),
            "N1" => Ok(ScenarioName::N1),
            "N2" => Ok(ScenarioName::N2),
            _ => Err(Error::Config(format!("unknown scenario {s:?} (expected L1, L2, N1 or N2)"))),
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// `intercept + arm * 1(A = 1) + l^T L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmLinear {
    pub intercept: f64,
    pub arm: f64,
    pub l: [f64; 2],
}

impl ArmLinear {
    pub fn eval(&self, treated: bool, l: &[f64]) -> f64 {
        self.intercept + if treated { self.arm } else { 0.0 } + self.l[0] * l[0] + self.l[1] * l[1]
    }
}

/// Shape of the outcome model beyond the scalar constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeShape {
    /// `c3(L) = c3^T L`, `c5(L) = c5^T L`, `c6 = 0`.
    Linear { c3: [f64; 2], c5: [f64; 2] },
    /// `c3 = |L|^2`, `c5 = |L1 - 1| - |L2 + 1|`, `c6 = sin L1 - 2 cos L2`.
    Wavy,
    /// `c3 = |L|^2`, `c5 = -6 L1 L2`, `c6 = 0`.
    Interaction,
}

/// `h(W, A, L) = c0 + c1 1(A=1) + c2 W + c3(L) + 1(A=1) (c4 W + c5(L) + W c6(L))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c4: f64,
    pub omega: f64,
    pub shape: OutcomeShape,
}

impl OutcomeParams {
    pub fn c3(&self, l: &[f64]) -> f64 {
        match self.shape {
            OutcomeShape::Linear { c3, .. } => c3[0] * l[0] + c3[1] * l[1],
            _ => l[0] * l[0] + l[1] * l[1],
        }
    }

    pub fn c5(&self, l: &[f64]) -> f64 {
        match self.shape {
            OutcomeShape::Linear { c5, .. } => c5[0] * l[0] + c5[1] * l[1],
            OutcomeShape::Wavy => (l[0] - 1.0).abs() - (l[1] + 1.0).abs(),
            OutcomeShape::Interaction => -6.0 * l[0] * l[1],
        }
    }

    pub fn c6(&self, l: &[f64]) -> f64 {
        match self.shape {
            OutcomeShape::Wavy => l[0].sin() - 2.0 * l[1].cos(),
            _ => 0.0,
        }
    }

    /// Outcome bridge at one point.
    pub fn bridge(&self, w: f64, treated: bool, l: &[f64]) -> f64 {
        let base = self.c0 + self.c2 * w + self.c3(l);
        if treated {
            base + self.c1 + self.c4 * w + self.c5(l) + w * self.c6(l)
        } else {
            base
        }
    }

    /// Treatment contrast given `E(W | .) = ew`.
    pub fn contrast(&self, ew: f64, l: &[f64]) -> f64 {
        self.c1 + self.c5(l) + (self.c4 + self.c6(l)) * ew
    }
}

/// Published propensity `Pr(A=1 | U, L) = 1 / (1 + exp(intercept + l^T L + u U))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityLogit {
    pub intercept: f64,
    pub l: [f64; 2],
    pub u: f64,
}

/// Parameters of the treatment bridge `q(Z, A, L) = 1 + exp(A (t0 + tz Z + ta 1(A=1) + tl^T L))`
/// and the regression of `Z` on `(U, A, L)` they are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentParams {
    pub t0: f64,
    pub tz: f64,
    pub ta: f64,
    pub tl: [f64; 2],
    /// `E(Z | U, A, L) = theta0 + theta_a 1(A=1) + theta_l^T L + theta_u U`.
    pub theta0: f64,
    pub theta_a: f64,
    pub theta_l: [f64; 2],
    pub theta_u: f64,
}

impl TreatmentParams {
    pub fn bridge(&self, z: f64, treated: bool, l: &[f64]) -> f64 {
        let s = if treated { 1.0 } else { -1.0 };
        let lin = self.t0 + self.tz * z + if treated { self.ta } else { 0.0 } + self.tl[0] * l[0] + self.tl[1] * l[1];
        1.0 + (s * lin).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: ScenarioName,
    pub l_mean: [f64; 2],
    pub l_sd: f64,
    /// `Pr(A = 1 | L) = 1 / (1 + exp(b^T L))`.
    pub treatment_logit: [f64; 2],
    pub z_mean: ArmLinear,
    pub w_mean: ArmLinear,
    pub u_mean: ArmLinear,
    /// Covariance of `(Z, W, U)` given `(A, L)`.
    pub sigma: [[f64; 3]; 3],
    pub propensity: PropensityLogit,
    pub treatment: TreatmentParams,
    pub outcome: OutcomeParams,
    pub noise_dims: usize,
    pub seed: u64,
}

/// Residuals of the compatibility identities; all should vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    /// `t_a + t_z^2 sigma^2_{z|u,a,l} + t_z theta_a`.
    pub treatment_arm: f64,
    /// `sigma_wz sigma_u^2 - sigma_wu sigma_zu`.
    pub proxy_independence: f64,
    /// `mu_a sigma_u^2 - sigma_wu kappa_a`.
    pub outcome_proxy_arm: f64,
    /// `-theta_u t_z sigma^2_{u|w,a,l} - kappa_a + sigma_wu mu_a / sigma_w^2`.
    pub confounder_arm: f64,
    /// Smallest eigenvalue of the covariance.
    pub min_eigenvalue: f64,
}

impl ConstraintResiduals {
    pub fn max_abs(&self) -> f64 {
        [self.treatment_arm, self.proxy_independence, self.outcome_proxy_arm, self.confounder_arm]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Builds a catalog scenario, derives the bridge parameters and checks the
/// compatibility identities.
pub fn scenario(name: ScenarioName, noise_dims: usize, seed: u64) -> Result<SimScenario> {
    let outcome = match name {
        ScenarioName::L1 | ScenarioName::L2 => OutcomeParams {
            c0: 2.0,
            c1: 0.5,
            c2: 8.0,
            c4: if name == ScenarioName::L1 { 0.25 } else { 0.0 },
            omega: 2.0,
            shape: OutcomeShape::Linear { c3: [0.25, 0.25], c5: [3.0, -5.0] },
        },
        ScenarioName::N1 => OutcomeParams { c0: 2.0, c1: 2.3, c2: 4.0, c4: -2.5, omega: 2.0, shape: OutcomeShape::Wavy },
        ScenarioName::N2 => OutcomeParams { c0: 2.0, c1: 0.25, c2: 5.0, c4: 0.0, omega: 2.0, shape: OutcomeShape::Interaction },
    };
    let sigma = [[1.0, 0.25, 0.5], [0.25, 1.0, 0.5], [0.5, 0.5, 1.0]];
    let z_mean = ArmLinear { intercept: 0.25, arm: 0.25, l: [0.25, 0.25] };
    let w_mean = ArmLinear { intercept: 0.25, arm: 0.125, l: [0.25, 0.25] };
    let u_mean = ArmLinear { intercept: 0.25, arm: 0.25, l: [0.25, 0.25] };
    let propensity = PropensityLogit { intercept: 0.09375, l: [0.1875, 0.1875], u: -0.25 };
    let (t0, tz, ta) = (0.25, -0.5, -0.125);

    let theta_u = sigma[0][2] / sigma[2][2];
    let theta0 = z_mean.intercept - theta_u * u_mean.intercept;
    let theta_a = z_mean.arm - theta_u * u_mean.arm;
    let theta_l = [z_mean.l[0] - theta_u * u_mean.l[0], z_mean.l[1] - theta_u * u_mean.l[1]];
    // match the L coefficient of the published propensity
    let tl = [propensity.l[0] - tz * theta_l[0], propensity.l[1] - tz * theta_l[1]];

    let s = SimScenario {
        name,
        l_mean: [0.25, 0.25],
        l_sd: 0.25,
        treatment_logit: [0.125, 0.125],
        z_mean,
        w_mean,
        u_mean,
        sigma,
        propensity,
        treatment: TreatmentParams { t0, tz, ta, tl, theta0, theta_a, theta_l, theta_u },
        outcome,
        noise_dims,
        seed,
    };
    let r = s.constraints();
    if r.max_abs() > 1e-10 || r.min_eigenvalue <= 0.0 {
        return Err(Error::Consistency(format!("scenario {name} violates its constraints: {r:?}")));
    }
    s.check_propensity()?;
    Ok(s)
}

impl SimScenario {
    pub fn constraints(&self) -> ConstraintResiduals {
        let sg = &self.sigma;
        let (s_zw, s_zu, s_wu) = (sg[0][1], sg[0][2], sg[1][2]);
        let (s_z2, s_w2, s_u2) = (sg[0][0], sg[1][1], sg[2][2]);
        let t = &self.treatment;
        let z_given = s_z2 - s_zu * s_zu / s_u2;
        let u_given = s_u2 - s_wu * s_wu / s_w2;
        let m = Matrix3::from_fn(|i, j| sg[i][j]);
        let min_eigenvalue = m.symmetric_eigen().eigenvalues.min();
        ConstraintResiduals {
            treatment_arm: t.ta + t.tz * t.tz * z_given + t.tz * t.theta_a,
            proxy_independence: s_zw * s_u2 - s_wu * s_zu,
            outcome_proxy_arm: self.w_mean.arm * s_u2 - s_wu * self.u_mean.arm,
            confounder_arm: -t.theta_u * t.tz * u_given - self.u_mean.arm + s_wu * self.w_mean.arm / s_w2,
            min_eigenvalue,
        }
    }

    /// The published `Pr(A | U, L)` must agree with Bayes' rule applied to
    /// `Pr(A | L)` and the normal law of `U | A, L`.
    fn check_propensity(&self) -> Result<()> {
        let ka = self.u_mean.arm;
        let s2 = self.sigma[2][2];
        // log-odds of A = 1 given U, L: -b^T L + ka (U - k0 - kl^T L) / s2 - ka^2 / (2 s2)
        let intercept = ka * self.u_mean.intercept / s2 + ka * ka / (2.0 * s2);
        let u = -ka / s2;
        let l = [
            self.treatment_logit[0] + ka * self.u_mean.l[0] / s2,
            self.treatment_logit[1] + ka * self.u_mean.l[1] / s2,
        ];
        let p = &self.propensity;
        let gap = [intercept - p.intercept, u - p.u, l[0] - p.l[0], l[1] - p.l[1]]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if gap > 1e-12 {
            return Err(Error::Consistency(format!("published propensity differs from the generator by {gap}")));
        }
        Ok(())
    }

    pub fn prop_given_l(&self, l: &[f64]) -> f64 {
        1.0 / (1.0 + (self.treatment_logit[0] * l[0] + self.treatment_logit[1] * l[1]).exp())
    }

    pub fn prop_given_ul(&self, u: f64, l: &[f64]) -> f64 {
        let p = &self.propensity;
        1.0 / (1.0 + (p.intercept + p.l[0] * l[0] + p.l[1] * l[1] + p.u * u).exp())
    }

    /// `E(W | U, L)`; `W` does not depend on `A` given `(U, L)`.
    pub fn w_given_ul(&self, u: f64, l: &[f64]) -> f64 {
        let w = &self.w_mean;
        let k = &self.u_mean;
        w.intercept + w.l[0] * l[0] + w.l[1] * l[1]
            + self.sigma[1][2] / self.sigma[2][2] * (u - k.intercept - k.l[0] * l[0] - k.l[1] * l[1])
    }

    /// `E(W | L) = mu0 + mu_l^T L + mu_a Pr(A = 1 | L)`.
    pub fn w_given_l(&self, l: &[f64]) -> f64 {
        self.w_mean.eval(false, l) + self.w_mean.arm * self.prop_given_l(l)
    }

    /// `E(W | L, Z)`, mixing the two arms by `Pr(A | L, Z)`.
    pub fn w_given_lz(&self, l: &[f64], z: f64) -> f64 {
        let (s_z2, s_zw) = (self.sigma[0][0], self.sigma[0][1]);
        let mut num = 0.0;
        let mut den = 0.0;
        for treated in [true, false] {
            let pa = if treated { self.prop_given_l(l) } else { 1.0 - self.prop_given_l(l) };
            let mz = self.z_mean.eval(treated, l);
            let dens = pa * (-(z - mz).powi(2) / (2.0 * s_z2)).exp();
            let ew = self.w_mean.eval(treated, l) + s_zw / s_z2 * (z - mz);
            num += dens * ew;
            den += dens;
        }
        num / den
    }

    /// `E(Y | W, U, A, Z, L)`.
    pub fn outcome_mean(&self, w: f64, u: f64, treated: bool, l: &[f64]) -> f64 {
        let o = &self.outcome;
        let mw = self.w_given_ul(u, l);
        let t = if treated { 1.0 } else { 0.0 };
        o.c0 + o.c1 * t + o.c3(l) + t * o.c5(l) + o.omega * w + (o.c2 + t * (o.c4 + o.c6(l)) - o.omega) * mw
    }

    /// `E(Y(a) | U, L)`.
    pub fn potential_mean(&self, u: f64, treated: bool, l: &[f64]) -> f64 {
        self.outcome.bridge(self.w_given_ul(u, l), treated, l)
    }

    /// Global optimum on `(L, U)`.
    pub fn d_star(&self, l: &[f64], u: f64) -> Arm {
        Arm::from_score(self.outcome.contrast(self.w_given_ul(u, l), l))
    }

    /// Optimum among rules on `(L, Z)`.
    pub fn d1_star(&self, l: &[f64], z: f64) -> Arm {
        Arm::from_score(self.outcome.contrast(self.w_given_lz(l, z), l))
    }

    /// Optimum among rules on `L`.
    pub fn d3_star(&self, l: &[f64]) -> Arm {
        Arm::from_score(self.outcome.contrast(self.w_given_l(l), l))
    }

    /// Analytic outcome bridge evaluated on a table.
    pub fn outcome_bridge(&self) -> FnBridge<impl Fn(&SampleTable, Arm) -> Result<DVector<f64>> + Send + Sync + use<>> {
        let o = self.outcome;
        FnBridge(move |d: &SampleTable, a: Arm| {
            check_blocks(d)?;
            Ok(DVector::from_fn(d.n(), |i, _| o.bridge(d.w()[(i, 0)], a.is_treated(), &[d.l()[(i, 0)], d.l()[(i, 1)]])))
        })
    }

    /// Analytic treatment bridge evaluated on a table.
    pub fn treatment_bridge(&self) -> FnBridge<impl Fn(&SampleTable, Arm) -> Result<DVector<f64>> + Send + Sync + use<>> {
        let t = self.treatment;
        FnBridge(move |d: &SampleTable, a: Arm| {
            check_blocks(d)?;
            Ok(DVector::from_fn(d.n(), |i, _| t.bridge(d.z()[(i, 0)], a.is_treated(), &[d.l()[(i, 0)], d.l()[(i, 1)]])))
        })
    }

    pub fn d1_star_rule(&self) -> FnRule<impl Fn(&SampleTable) -> Result<Vec<Arm>> + Send + Sync + use<>> {
        let s = self.clone();
        FnRule {
            features: FeatureSet::LZ,
            rule: move |d: &SampleTable| {
                check_blocks(d)?;
                Ok((0..d.n()).map(|i| s.d1_star(&[d.l()[(i, 0)], d.l()[(i, 1)]], d.z()[(i, 0)])).collect())
            },
        }
    }

    pub fn d3_star_rule(&self) -> FnRule<impl Fn(&SampleTable) -> Result<Vec<Arm>> + Send + Sync + use<>> {
        let s = self.clone();
        FnRule {
            features: FeatureSet::L,
            rule: move |d: &SampleTable| {
                check_blocks(d)?;
                Ok((0..d.n()).map(|i| s.d3_star(&[d.l()[(i, 0)], d.l()[(i, 1)]])).collect())
            },
        }
    }

    /// Draws `n` rows with uniform outcome noise.
    pub fn generate(&self, n: usize) -> Result<GeneratedData> {
        self.draw(n, true)
    }

    /// Draws `n` rows whose outcome is the conditional mean.
    pub fn noise_free_testset(&self, n: usize) -> Result<GeneratedData> {
        self.draw(n, false)
    }

    fn draw(&self, n: usize, noisy: bool) -> Result<GeneratedData> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot generate an empty sample".into()));
        }
        let seed = self.seed;
        let p = 2 + self.noise_dims;
        let mut l = DMatrix::zeros(n, p);
        for j in 0..2 {
            let mut r = rng::stream(seed, 10 + j as u64);
            for i in 0..n {
                l[(i, j)] = self.l_mean[j] + self.l_sd * r.sample::<f64, _>(StandardNormal);
            }
        }
        for j in 0..self.noise_dims {
            let mut r = rng::stream(seed, 100 + j as u64);
            for i in 0..n {
                l[(i, 2 + j)] = r.random_range(-1.0..=1.0);
            }
        }
        let chol = Matrix3::from_fn(|i, j| self.sigma[i][j])
            .cholesky()
            .ok_or_else(|| Error::Consistency("covariance is not positive definite".into()))?
            .l();
        let mut ra = rng::stream(seed, 20);
        let mut re = rng::stream(seed, 30);
        let mut ry = rng::stream(seed, 40);
        let mut z = DMatrix::zeros(n, 1);
        let mut w = DMatrix::zeros(n, 1);
        let mut y = DVector::zeros(n);
        let mut a = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        let mut truth = GroundTruth {
            prop_treated: Vec::with_capacity(n),
            mu_y: Vec::with_capacity(n),
            mu_treated: Some(Vec::with_capacity(n)),
            mu_control: Some(Vec::with_capacity(n)),
            noise_free: !noisy,
        };
        for i in 0..n {
            let li = [l[(i, 0)], l[(i, 1)]];
            let treated = ra.random::<f64>() < self.prop_given_l(&li);
            let e = chol * nalgebra::Vector3::from_fn(|_, _| re.sample::<f64, _>(StandardNormal));
            let zi = self.z_mean.eval(treated, &li) + e[0];
            let wi = self.w_mean.eval(treated, &li) + e[1];
            let ui = self.u_mean.eval(treated, &li) + e[2];
            let mu = self.outcome_mean(wi, ui, treated, &li);
            let noise: f64 = ry.random_range(-1.0..=1.0);
            z[(i, 0)] = zi;
            w[(i, 0)] = wi;
            y[i] = if noisy { mu + noise } else { mu };
            a.push(if treated { Arm::Treated } else { Arm::Control });
            u.push(ui);
            truth.prop_treated.push(self.prop_given_ul(ui, &li));
            truth.mu_y.push(mu);
            truth.mu_treated.as_mut().unwrap().push(self.potential_mean(ui, true, &li));
            truth.mu_control.as_mut().unwrap().push(self.potential_mean(ui, false, &li));
        }
        Ok(GeneratedData { table: SampleTable::new(l, z, w, a, y)?, u, truth, scenario: self.name, seed, n })
    }
}

fn check_blocks(d: &SampleTable) -> Result<()> {
    if d.l().ncols() < 2 || d.z().ncols() < 1 || d.w().ncols() < 1 {
        return Err(Error::ContractViolation("analytic functions need two L columns and scalar Z, W".into()));
    }
    Ok(())
}

/// Observed table plus the hidden confounder and ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub table: SampleTable,
    pub u: Vec<f64>,
    pub truth: GroundTruth,
    pub scenario: ScenarioName,
    pub seed: u64,
    pub n: usize,
}

impl GeneratedData {
    /// Global optimal decisions, which read the hidden `U`.
    pub fn d_star(&self, s: &SimScenario) -> Vec<Arm> {
        let l = self.table.l();
        (0..self.n).map(|i| s.d_star(&[l[(i, 0)], l[(i, 1)]], self.u[i])).collect()
    }
}

/// Logistic regression of `1(A = 1)` on `[1, X]` by Newton's method, in the
/// `1 / (1 + exp(eta))` parameterization: returns `-beta` of the usual
/// logit so coefficients are comparable with [`PropensityLogit`].
pub fn fit_denominator_logit(x: &DMatrix<f64>, a: &[Arm]) -> Result<DVector<f64>> {
    let n = x.nrows();
    let p = x.ncols() + 1;
    let mut design = DMatrix::from_element(n, p, 1.0);
    design.columns_mut(1, p - 1).copy_from(x);
    let t = DVector::from_fn(n, |i, _| if a[i].is_treated() { 1.0 } else { 0.0 });
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = &design * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = design.tr_mul(&(&t - &mu));
        let wts = mu.map(|m| m * (1.0 - m));
        let mut xw = design.clone();
        for i in 0..n {
            xw.row_mut(i).scale_mut(wts[i]);
        }
        let info = design.tr_mul(&xw);
        let step = info
            .cholesky()
            .ok_or_else(|| Error::DegenerateData("logistic information matrix is singular".into()))?
            .solve(&grad);
        beta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    Ok(-beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_meets_constraints() {
        for name in ScenarioName::ALL {
            let s = scenario(name, 0, 1).unwrap();
            let r = s.constraints();
            assert!(r.max_abs() < 1e-10, "{name}: {r:?}");
            assert!(r.min_eigenvalue > 0.0);
        }
    }

    #[test]
    fn derived_parameters() {
        let s = scenario(ScenarioName::L1, 0, 1).unwrap();
        let t = s.treatment;
        assert!((t.theta_a - 0.125).abs() < 1e-15);
        assert_eq!(t.theta_l, [0.125, 0.125]);
        assert_eq!(t.tl, [0.25, 0.25]);
        let z_given = 1.0 - 0.25;
        assert!((-t.tz * t.tz * z_given - t.tz * t.theta_a - t.ta).abs() < 1e-15);
        assert!((s.sigma[1][2] * s.u_mean.arm / s.sigma[2][2] - s.w_mean.arm).abs() < 1e-15);
    }

    #[test]
    fn d_star_hand_point() {
        let s = scenario(ScenarioName::L1, 0, 1).unwrap();
        let l = [0.25, 0.25];
        let u = s.u_mean.eval(false, &l);
        let score = s.outcome.contrast(s.w_given_ul(u, &l), &l);
        assert!((score - 0.09375).abs() < 1e-12);
        assert_eq!(s.d_star(&l, u), Arm::Treated);
    }

    #[test]
    fn l2_optimum_ignores_u() {
        let s = scenario(ScenarioName::L2, 0, 1).unwrap();
        for (l, u) in [([0.1, 0.4], -2.0), ([0.5, 0.1], 3.0), ([0.3, 0.3], 0.0)] {
            assert_eq!(s.d_star(&l, u), s.d3_star(&l));
        }
    }

    #[test]
    fn bridge_moment_identities_hold_pointwise() {
        // E[q(Z, a, L) | U, A = a, L] = 1 / Pr(A = a | U, L), by Gauss-Hermite in Z
        let s = scenario(ScenarioName::L1, 0, 1).unwrap();
        let t = s.treatment;
        let sd = (1.0f64 - 0.25).sqrt();
        let nodes: Vec<(f64, f64)> = gauss_hermite();
        for (l, u) in [([0.2, 0.3], 0.5), ([0.0, 0.6], -1.0)] {
            for treated in [true, false] {
                let mz = t.theta0 + if treated { t.theta_a } else { 0.0 } + t.theta_l[0] * l[0] + t.theta_l[1] * l[1] + t.theta_u * u;
                let e: f64 = nodes.iter().map(|(x, w)| w * t.bridge(mz + sd * x, treated, &l)).sum();
                let p = s.prop_given_ul(u, &l);
                let want = if treated { 1.0 / p } else { 1.0 / (1.0 - p) };
                assert!((e - want).abs() < 1e-9, "{e} vs {want}");
            }
        }
    }

    /// Probabilists' Gauss-Hermite rule with 40 nodes (weights sum to 1).
    pub(crate) fn gauss_hermite() -> Vec<(f64, f64)> {
        let m = 40;
        let jac = DMatrix::from_fn(m, m, |i, j| if i + 1 == j || j + 1 == i { ((i.max(j)) as f64).sqrt() } else { 0.0 });
        let eig = jac.symmetric_eigen();
        (0..m).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect()
    }

    #[test]
    fn generation_is_reproducible_and_noise_columns_do_not_disturb() {
        let s = scenario(ScenarioName::N1, 0, 7).unwrap();
        let a = s.generate(50).unwrap();
        let b = s.generate(50).unwrap();
        assert_eq!(a.table.y(), b.table.y());
        let s8 = scenario(ScenarioName::N1, 8, 7).unwrap();
        let c = s8.generate(50).unwrap();
        assert_eq!(c.table.l().ncols(), 10);
        assert_eq!(a.table.y(), c.table.y());
        assert_eq!(a.table.l().columns(0, 2), c.table.l().columns(0, 2));
        assert!(c.table.l().columns(2, 8).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn noise_free_rows_have_zero_residual() {
        let s = scenario(ScenarioName::L2, 0, 3).unwrap();
        let g = s.noise_free_testset(200).unwrap();
        for i in 0..200 {
            assert_eq!(g.table.y()[i], g.truth.mu_y[i]);
        }
        let noisy = s.generate(200).unwrap();
        let r: Vec<f64> = (0..200).map(|i| noisy.table.y()[i] - noisy.truth.mu_y[i]).collect();
        assert!(r.iter().all(|v| v.abs() <= 1.0) && r.iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn marginal_treatment_rate_matches_quadrature() {
        let s = scenario(ScenarioName::L1, 0, 11).unwrap();
        let g = s.generate(100_000).unwrap();
        let rate = g.table.arm_count(Arm::Treated) as f64 / 1e5;
        let gh = gauss_hermite();
        let mut want = 0.0;
        for (x1, w1) in &gh {
            for (x2, w2) in &gh {
                want += w1 * w2 * s.prop_given_l(&[0.25 + 0.25 * x1, 0.25 + 0.25 * x2]);
            }
        }
        assert!((rate - want).abs() < 0.01, "{rate} vs {want}");
    }

    #[test]
    fn proxy_covariance_and_conditional_independence() {
        let s = scenario(ScenarioName::L1, 0, 12).unwrap();
        let g = s.generate(100_000).unwrap();
        let t = &g.table;
        // residual covariance of (Z, W) given (A, L) uses the known means
        let mut czw = 0.0;
        let mut count = 0.0;
        for i in 0..g.n {
            if t.a()[i].is_treated() {
                let l = [t.l()[(i, 0)], t.l()[(i, 1)]];
                czw += (t.z()[(i, 0)] - s.z_mean.eval(true, &l)) * (t.w()[(i, 0)] - s.w_mean.eval(true, &l));
                count += 1.0;
            }
        }
        assert!((czw / count - 0.25).abs() < 0.02);
        // W minus E(W | U, L) should not correlate with A
        let res: Vec<f64> = (0..g.n).map(|i| t.w()[(i, 0)] - s.w_given_ul(g.u[i], &[t.l()[(i, 0)], t.l()[(i, 1)]])).collect();
        let av: Vec<f64> = t.a().iter().map(|a| a.sign()).collect();
        let corr = correlation(&res, &av);
        assert!(corr.abs() < 0.02, "{corr}");
    }

    fn correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn w_given_lz_matches_binned_average() {
        let s = scenario(ScenarioName::L1, 0, 13).unwrap();
        let g = s.generate(100_000).unwrap();
        let t = &g.table;
        let (mut err, mut num) = (0.0, 0.0);
        for i in 0..g.n {
            let l = [t.l()[(i, 0)], t.l()[(i, 1)]];
            err += t.w()[(i, 0)] - s.w_given_lz(&l, t.z()[(i, 0)]);
            num += 1.0;
        }
        assert!((err / num).abs() < 0.01);
    }

    #[test]
    fn unknown_scenario_is_config_error() {
        assert!(matches!("X9".parse::<ScenarioName>(), Err(Error::Config(_))));
        assert_eq!("n2".parse::<ScenarioName>().unwrap(), ScenarioName::N2);
    }
}
