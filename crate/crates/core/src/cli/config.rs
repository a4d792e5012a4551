use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridges::BridgeTuning;
use crate::error::{Error, Result};
use crate::policy::PolicyTuning;
use crate::simgen::ScenarioName;

/// Learner names accepted by `--learner`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LearnerChoice {
    #[serde(rename = "d1")]
    OutcomeLZ,
    #[serde(rename = "d2")]
    TreatmentLW,
    #[serde(rename = "d4")]
    Maximum,
    #[serde(rename = "d3dr")]
    DoublyRobust,
    #[serde(rename = "d1L")]
    OutcomeL,
    #[serde(rename = "d2L")]
    TreatmentL,
}

impl LearnerChoice {
    pub const ALL: [LearnerChoice; 6] = [
        LearnerChoice::OutcomeLZ,
        LearnerChoice::TreatmentLW,
        LearnerChoice::Maximum,
        LearnerChoice::DoublyRobust,
        LearnerChoice::OutcomeL,
        LearnerChoice::TreatmentL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LearnerChoice::OutcomeLZ => "d1",
            LearnerChoice::TreatmentLW => "d2",
            LearnerChoice::Maximum => "d4",
            LearnerChoice::DoublyRobust => "d3dr",
            LearnerChoice::OutcomeL => "d1L",
            LearnerChoice::TreatmentL => "d2L",
        }
    }
}

impl FromStr for LearnerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown learner {s:?} (expected d1, d2, d4, d3dr, d1L or d2L)")))
    }
}

impl fmt::Display for LearnerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: ScenarioName,
    pub n: usize,
    pub noise_dims: usize,
    /// Rows of the noise-free test set written next to the data; 0 skips it.
    pub test_n: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { scenario: ScenarioName::L1, n: 2000, noise_dims: 0, test_n: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learner: LearnerChoice,
    /// Defaults to `<out>/data.csv`.
    pub data: Option<PathBuf>,
    /// Defaults to `<out>/model.json`.
    pub model: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { learner: LearnerChoice::OutcomeLZ, data: None, model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Defaults to `<out>/model.json`.
    pub model: Option<PathBuf>,
    /// Defaults to `<out>/test.csv`.
    pub data: Option<PathBuf>,
    /// Ground truth for the oracle value; defaults to `<out>/test_truth.csv`
    /// when that file exists.
    pub truth: Option<PathBuf>,
    /// Whether the data file holds conditional means as outcomes.
    pub noise_free: bool,
    /// Bridges for the identified values are refitted on the first this
    /// many rows; 0 skips the identified values.
    pub bridge_rows: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { model: None, data: None, truth: None, noise_free: true, bridge_rows: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenario: ScenarioName,
    pub n: usize,
    pub replicates: usize,
    pub learners: Vec<LearnerChoice>,
    /// Rows of the shared noise-free test set.
    pub test_n: usize,
    pub noise_dims: usize,
    /// Also record the doubly robust interval at the analytic optimum
    /// among rules on `L`, with fitted bridges.
    pub coverage: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioName::L1,
            n: 500,
            replicates: 1,
            learners: vec![LearnerChoice::OutcomeLZ],
            test_n: 100_000,
            noise_dims: 0,
            coverage: false,
        }
    }
}

/// Whole-run configuration; every command reads its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub evaluate: EvaluateConfig,
    pub benchmark: BenchmarkConfig,
    pub bridges: BridgeTuning,
    pub policy: PolicyTuning,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            simulate: SimulateConfig::default(),
            fit: FitConfig::default(),
            evaluate: EvaluateConfig::default(),
            benchmark: BenchmarkConfig::default(),
            bridges: BridgeTuning::default(),
            policy: PolicyTuning::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub scenario: Option<ScenarioName>,
    pub n: Option<usize>,
    pub learner: Option<LearnerChoice>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(s) = o.scenario {
            self.simulate.scenario = s;
            self.benchmark.scenario = s;
        }
        if let Some(n) = o.n {
            self.simulate.n = n;
            self.benchmark.n = n;
        }
        if let Some(l) = o.learner {
            self.fit.learner = l;
            self.benchmark.learners = vec![l];
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bridges.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.policy.validate()?;
        if self.policy.rho_grid.is_empty() {
            return Err(Error::Config("policy.rho_grid must not be empty".into()));
        }
        if self.simulate.n == 0 || self.benchmark.n == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        if self.benchmark.replicates == 0 {
            return Err(Error::Config("benchmark.replicates must be at least 1".into()));
        }
        if self.benchmark.learners.is_empty() && !self.benchmark.coverage {
            return Err(Error::Config("benchmark has nothing to run".into()));
        }
        if self.benchmark.test_n == 0 {
            return Err(Error::Config("benchmark.test_n must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, leaving out the output directory
    /// and the worker count since neither changes any result.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out: PathBuf::new(), workers: 0, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("configuration serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}
