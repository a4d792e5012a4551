//! Treatment rules and the four proximal policy learners.
//!
//! Every learner reduces to a weighted classification problem solved by
//! [`classifier::fit_weighted_classifier`]; they differ in the weights, the
//! pseudo-labels, the features the rule may read and the value functional
//! used to pick the penalty by cross-validation.

pub mod classifier;
pub mod learners;
pub mod surrogate;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crate::folds::FoldPlan;
pub use classifier::{fit_weighted_classifier, ClassSpec};
pub use learners::{
    dr_weights, learn_dr, learn_maximum, learn_outcome, learn_treatment, Branch, LearnedPolicy, LearnerKind,
    LearnerReport,
};
pub use surrogate::SurrogateLoss;

use crate::data::{hstack, Arm, ColumnScaling, SampleTable};
use crate::error::{Error, Result};
use crate::kernels::KernelExpansion;

/// Which observed blocks a rule reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    L,
    LZ,
    LW,
}

impl FeatureSet {
    pub fn select(self, data: &SampleTable) -> DMatrix<f64> {
        match self {
            FeatureSet::L => data.l().clone(),
            FeatureSet::LZ => hstack(&[data.l(), data.z()]),
            FeatureSet::LW => hstack(&[data.l(), data.w()]),
        }
    }

    pub fn reads_z(self) -> bool {
        self == FeatureSet::LZ
    }

    pub fn reads_w(self) -> bool {
        self == FeatureSet::LW
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::L => "L",
            FeatureSet::LZ => "L,Z",
            FeatureSet::LW => "L,W",
        }
    }
}

/// Real-valued score whose sign is the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionFunction {
    Linear { weights: DVector<f64>, intercept: f64 },
    Kernel(KernelExpansion),
    /// Mean of the member scores.
    Aggregate(Vec<DecisionFunction>),
}

impl DecisionFunction {
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            DecisionFunction::Linear { weights, intercept } => {
                if weights.len() != x.ncols() {
                    return Err(Error::InvalidArgument(format!(
                        "linear rule has {} weights but input has {} columns",
                        weights.len(),
                        x.ncols()
                    )));
                }
                Ok((x * weights).add_scalar(*intercept))
            }
            DecisionFunction::Kernel(e) => e.eval(x),
            DecisionFunction::Aggregate(parts) => {
                if parts.is_empty() {
                    return Err(Error::InvalidArgument("empty aggregate rule".into()));
                }
                let mut total = DVector::zeros(x.nrows());
                for p in parts {
                    total += p.scores(x)?;
                }
                Ok(total / parts.len() as f64)
            }
        }
    }
}

/// A rule that assigns an arm to every row of a table.
pub trait Rule: Send + Sync {
    fn features(&self) -> FeatureSet;
    fn decide(&self, data: &SampleTable) -> Result<Vec<Arm>>;
}

/// Learned rule: features are standardized with the training scaling before
/// scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub features: FeatureSet,
    pub scaling: ColumnScaling,
    pub decision: DecisionFunction,
}

impl Policy {
    pub fn scores(&self, data: &SampleTable) -> Result<DVector<f64>> {
        let x = self.features.select(data);
        if x.ncols() != self.scaling.dim() {
            return Err(Error::InvalidArgument(format!(
                "policy expects {} feature columns, table provides {}",
                self.scaling.dim(),
                x.ncols()
            )));
        }
        self.decision.scores(&self.scaling.apply(&x))
    }
}

impl Rule for Policy {
    fn features(&self) -> FeatureSet {
        self.features
    }

    fn decide(&self, data: &SampleTable) -> Result<Vec<Arm>> {
        Ok(self.scores(data)?.iter().map(|&s| Arm::from_score(s)).collect())
    }
}

/// Rule given by a closure over the table.
pub struct FnRule<F> {
    pub features: FeatureSet,
    pub rule: F,
}

impl<F> Rule for FnRule<F>
where
    F: Fn(&SampleTable) -> Result<Vec<Arm>> + Send + Sync,
{
    fn features(&self) -> FeatureSet {
        self.features
    }

    fn decide(&self, data: &SampleTable) -> Result<Vec<Arm>> {
        (self.rule)(data)
    }
}

/// Assigns `arm` to everyone.
pub fn constant_rule(arm: Arm) -> FnRule<impl Fn(&SampleTable) -> Result<Vec<Arm>> + Send + Sync> {
    FnRule { features: FeatureSet::L, rule: move |data: &SampleTable| Ok(vec![arm; data.n()]) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FunctionClass {
    Linear,
    /// Gaussian kernel with HSIC-selected bandwidth; Nyström rank defaults
    /// to `2 * ceil(sqrt(n))`.
    Kernel { rank: Option<usize> },
}

/// `count` log-spaced values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyTuning {
    /// Penalty candidates; an empty grid disables the learner.
    pub rho_grid: Vec<f64>,
    pub folds: usize,
    pub class: FunctionClass,
    pub loss: SurrogateLoss,
    pub seed: u64,
    /// Row cap for the bandwidth statistics.
    pub bandwidth_rows: usize,
}

impl Default for PolicyTuning {
    fn default() -> Self {
        Self {
            rho_grid: log_grid(1e-4, 10.0, 8),
            folds: 5,
            class: FunctionClass::Linear,
            loss: SurrogateLoss::SmoothHinge,
            seed: 0,
            bandwidth_rows: 1000,
        }
    }
}

impl PolicyTuning {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rho_grid.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Config(format!("rho values must be positive, got {r}")));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("policy tuning needs at least 2 folds, got {}", self.folds)));
        }
        if let FunctionClass::Kernel { rank: Some(0) } = self.class {
            return Err(Error::Config("kernel rank must be positive".into()));
        }
        if self.bandwidth_rows < 2 {
            return Err(Error::Config("bandwidth_rows must be at least 2".into()));
        }
        Ok(())
    }
}
