use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{LearnerChoice, RunConfig};
use super::records::{append_records, NamedValue, ResultRecord};
use crate::bridges::{fit_bridge_pair, BridgeFitter, CachedKernelFitter, TuningReport};
use crate::data::SampleTable;
use crate::error::{Error, Result};
use crate::evaluate::{
    value_dr, value_oracle_decisions, value_oracle_ipw, value_oracle_noise_free, value_outcome,
    value_potential_mean, value_treatment, GroundTruth, ValueEstimate,
};
use crate::io;
use crate::policy::{learn_dr, learn_maximum, learn_outcome, learn_treatment, FeatureSet, LearnedPolicy, PolicyTuning, Rule};
use crate::rng;
use crate::simgen::{scenario, GeneratedData, ScenarioName, SimScenario};

const TEST_SET_TAG: u64 = 0x7e57;
const EVAL_BRIDGE_TAG: u64 = 0xe7a1;
const REPLICATE_TAG: u64 = 0xbe;
const COVERAGE_TAG: u64 = 0xc0;

/// Runs one learner by its command-line name.
pub fn train(
    choice: LearnerChoice,
    data: &SampleTable,
    fitter: &dyn BridgeFitter,
    tuning: &PolicyTuning,
) -> Result<LearnedPolicy> {
    match choice {
        LearnerChoice::OutcomeLZ => learn_outcome(data, fitter, tuning, FeatureSet::LZ),
        LearnerChoice::OutcomeL => learn_outcome(data, fitter, tuning, FeatureSet::L),
        LearnerChoice::TreatmentLW => learn_treatment(data, fitter, tuning, FeatureSet::LW),
        LearnerChoice::TreatmentL => learn_treatment(data, fitter, tuning, FeatureSet::L),
        LearnerChoice::Maximum => learn_maximum(data, fitter, tuning, tuning),
        LearnerChoice::DoublyRobust => learn_dr(data, fitter, tuning),
    }
}

fn policy_tuning(cfg: &RunConfig, seed: u64) -> PolicyTuning {
    PolicyTuning { seed: rng::derive(seed, cfg.policy.seed), ..cfg.policy.clone() }
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn build_scenario(name: ScenarioName, noise_dims: usize, seed: u64) -> Result<SimScenario> {
    scenario(name, noise_dims, seed).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub scenario: String,
    pub seed: u64,
    pub n: usize,
    pub noise_dims: usize,
    pub header: Vec<String>,
    pub files: Vec<String>,
    pub test_n: usize,
    pub test_seed: Option<u64>,
    pub constraint_residual: f64,
}

/// Writes `data.csv`, `truth.csv`, optionally `test.csv` and
/// `test_truth.csv`, and `manifest.json`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Manifest> {
    ensure_out(cfg)?;
    let sim = &cfg.simulate;
    let s = build_scenario(sim.scenario, sim.noise_dims, cfg.seed)?;
    let g = s.generate(sim.n)?;
    io::write_table_file(&cfg.out_path("data.csv"), &g.table)?;
    io::write_truth_file(&cfg.out_path("truth.csv"), &g.u, &g.truth)?;
    let mut files = vec!["data.csv".to_string(), "truth.csv".to_string()];
    let mut test_seed = None;
    if sim.test_n > 0 {
        let seed = rng::derive(cfg.seed, TEST_SET_TAG);
        let t = build_scenario(sim.scenario, sim.noise_dims, seed)?.noise_free_testset(sim.test_n)?;
        io::write_table_file(&cfg.out_path("test.csv"), &t.table)?;
        io::write_truth_file(&cfg.out_path("test_truth.csv"), &t.u, &t.truth)?;
        files.extend(["test.csv".to_string(), "test_truth.csv".to_string()]);
        test_seed = Some(seed);
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        scenario: sim.scenario.to_string(),
        seed: cfg.seed,
        n: sim.n,
        noise_dims: sim.noise_dims,
        header: io::table_header(&g.table),
        files,
        test_n: sim.test_n,
        test_seed,
        constraint_residual: s.constraints().max_abs(),
    };
    write_json(&cfg.out_path("manifest.json"), &manifest)?;
    info!("wrote {} rows to {}", sim.n, cfg.out.display());
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeDiagnostic {
    pub bridge: String,
    pub arm: String,
    pub report: TuningReport,
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub learner: LearnerChoice,
    pub config_hash: String,
    pub training_rows: usize,
    pub learned: LearnedPolicy,
    /// Tuning records of the bridges fitted on the full training table.
    pub bridges: Vec<BridgeDiagnostic>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn diagnostics(cache: &CachedKernelFitter, rows: usize) -> Vec<BridgeDiagnostic> {
    let mut out = Vec::new();
    let arms = |bridge: &str, t: &TuningReport, c: &TuningReport| {
        [
            BridgeDiagnostic { bridge: bridge.into(), arm: "treated".into(), report: t.clone() },
            BridgeDiagnostic { bridge: bridge.into(), arm: "control".into(), report: c.clone() },
        ]
    };
    for f in cache.outcome_fits_with_rows(rows) {
        out.extend(arms("outcome", &f.treated.report, &f.control.report));
    }
    for f in cache.treatment_fits_with_rows(rows) {
        out.extend(arms("treatment", &f.treated.report, &f.control.report));
    }
    out
}

fn input_or(path: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.out_path(name))
}

/// Fits the configured learner on a data file and writes `model.json`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<ResultRecord> {
    ensure_out(cfg)?;
    let start = Instant::now();
    let data_path = input_or(&cfg.fit.data, cfg, "data.csv");
    let data = io::read_table_file(&data_path)?;
    let cache = CachedKernelFitter::new(cfg.bridges.clone());
    let learned = train(cfg.fit.learner, &data, &cache, &policy_tuning(cfg, cfg.seed))?;
    let model = ModelFile {
        learner: cfg.fit.learner,
        config_hash: cfg.hash(),
        training_rows: data.n(),
        learned,
        bridges: diagnostics(&cache, data.n()),
    };
    write_json(&input_or(&cfg.fit.model, cfg, "model.json"), &model)?;
    let mut rec = ResultRecord::new("fit", &model.config_hash, cfg.seed, None);
    rec.n = Some(data.n());
    rec.learner = Some(cfg.fit.learner.to_string());
    rec.tuning = Some(serde_json::json!({ "policy": model.learned.report, "bridges": model.bridges }));
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    append_records(&cfg.out_path("records.jsonl"), std::slice::from_ref(&rec))?;
    info!(
        "{} on {} rows: rho {} cv value {:.4}",
        cfg.fit.learner,
        data.n(),
        model.learned.report.best_rho,
        model.learned.report.best_cv_value
    );
    Ok(rec)
}

/// Scores a saved model on a table: identified values with bridges refitted
/// on (up to `bridge_rows` of) that table, plus oracle values when ground
/// truth is available.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<ResultRecord> {
    ensure_out(cfg)?;
    let start = Instant::now();
    let e = &cfg.evaluate;
    let model = ModelFile::load(&input_or(&e.model, cfg, "model.json"))?;
    let (data_path, truth_path, noise_free) = match &e.data {
        Some(p) => (p.clone(), e.truth.clone(), e.noise_free),
        None if cfg.out_path("test.csv").exists() => {
            (cfg.out_path("test.csv"), Some(e.truth.clone().unwrap_or_else(|| cfg.out_path("test_truth.csv"))), true)
        }
        None => (cfg.out_path("data.csv"), Some(e.truth.clone().unwrap_or_else(|| cfg.out_path("truth.csv"))), false),
    };
    let data = io::read_table_file(&data_path)?;
    let policy = &model.learned.policy;
    let label = model.learner.to_string();
    let mut values = Vec::new();
    let mut push = |est: ValueEstimate| values.push(NamedValue { policy: label.clone(), estimate: est });

    if e.bridge_rows > 0 {
        let fit_rows: Vec<usize> = (0..data.n().min(e.bridge_rows)).collect();
        let bridges = fit_bridge_pair(&data.subset(&fit_rows), &cfg.bridges, rng::derive(cfg.seed, EVAL_BRIDGE_TAG))?;
        let features = policy.features();
        if matches!(features, FeatureSet::L | FeatureSet::LZ) {
            push(value_outcome(&data, &bridges, policy)?);
        }
        if matches!(features, FeatureSet::L | FeatureSet::LW) {
            push(value_treatment(&data, &bridges, policy)?);
        }
        if features == FeatureSet::L {
            push(value_dr(&data, &bridges, &bridges, policy)?);
        }
    }
    if let Some(tp) = truth_path.filter(|p| p.exists()) {
        let truth = io::read_truth_file(&tp, noise_free)?;
        push(oracle_value(&data, &truth, policy)?);
        if truth.mu_treated.is_some() && truth.mu_control.is_some() {
            push(value_potential_mean(&truth, &policy.decide(&data)?)?);
        }
    }
    let mut rec = ResultRecord::new("evaluate", &cfg.hash(), cfg.seed, None);
    rec.n = Some(data.n());
    rec.learner = Some(label);
    rec.values = values;
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    append_records(&cfg.out_path("records.jsonl"), std::slice::from_ref(&rec))?;
    Ok(rec)
}

fn oracle_value(data: &SampleTable, truth: &GroundTruth, rule: &dyn Rule) -> Result<ValueEstimate> {
    if truth.noise_free {
        value_oracle_noise_free(data, truth, rule)
    } else {
        value_oracle_ipw(data, truth, rule)
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub learner: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// One row of `coverage.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub replicate: usize,
    pub point: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub target: f64,
    pub covered: bool,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub records: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
    pub coverage: Vec<CoverageRow>,
    /// Reference values of the analytic rules on the shared test set.
    pub references: Vec<NamedValue>,
    pub failures: usize,
    /// Largest exit status among failed replicates, 0 if none failed.
    pub exit_code: i32,
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(rows: &[(String, f64)], order: &[String]) -> Vec<SummaryRow> {
    order
        .iter()
        .filter_map(|name| {
            let mut v: Vec<f64> = rows.iter().filter(|(l, _)| l == name).map(|(_, x)| *x).collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(SummaryRow {
                learner: name.clone(),
                count: v.len(),
                median: quantile_sorted(&v, 0.5),
                q1: quantile_sorted(&v, 0.25),
                q3: quantile_sorted(&v, 0.75),
            })
        })
        .collect()
}

fn reference_values(s: &SimScenario, test: &GeneratedData) -> Result<Vec<NamedValue>> {
    let named = |policy: &str, estimate| NamedValue { policy: policy.into(), estimate };
    Ok(vec![
        named("d*", value_oracle_decisions(&test.table, &test.truth, &test.d_star(s))?),
        named("d1*", value_oracle_noise_free(&test.table, &test.truth, &s.d1_star_rule())?),
        named("d3*", value_oracle_noise_free(&test.table, &test.truth, &s.d3_star_rule())?),
        named("d3* (potential means)", value_potential_mean(&test.truth, &s.d3_star_rule().decide(&test.table)?)?),
    ])
}

struct Replicate {
    records: Vec<ResultRecord>,
    coverage: Option<CoverageRow>,
}

fn run_replicate(cfg: &RunConfig, r: usize, test: &GeneratedData, target: f64) -> Replicate {
    let b = &cfg.benchmark;
    let hash = cfg.hash();
    let seed = rng::derive(rng::derive(cfg.seed, REPLICATE_TAG), r as u64);
    let base = |learner: Option<String>| {
        let mut rec = ResultRecord::new("benchmark", &hash, seed, Some(r));
        rec.scenario = Some(b.scenario.to_string());
        rec.n = Some(b.n);
        rec.learner = learner;
        rec
    };
    let data = match scenario(b.scenario, b.noise_dims, seed).and_then(|s| s.generate(b.n)) {
        Ok(g) => g,
        Err(e) => {
            warn!("replicate {r}: {e}");
            let mut rec = base(None);
            rec.fail(&e);
            return Replicate { records: vec![rec], coverage: None };
        }
    };
    let cache = CachedKernelFitter::new(cfg.bridges.clone());
    let tuning = policy_tuning(cfg, seed);
    let mut records = Vec::new();
    for &learner in &b.learners {
        let start = Instant::now();
        let mut rec = base(Some(learner.to_string()));
        let outcome = train(learner, &data.table, &cache, &tuning).and_then(|fit| {
            let v = value_oracle_noise_free(&test.table, &test.truth, &fit.policy)?;
            Ok((fit, v))
        });
        match outcome {
            Ok((fit, v)) => {
                rec.values.push(NamedValue { policy: learner.to_string(), estimate: v });
                rec.tuning = serde_json::to_value(&fit.report).ok();
            }
            Err(e) => {
                warn!("replicate {r} learner {learner}: {e}");
                rec.fail(&e);
            }
        }
        rec.wall_clock_seconds = start.elapsed().as_secs_f64();
        records.push(rec);
    }
    let mut coverage = None;
    if b.coverage {
        let start = Instant::now();
        let mut rec = base(Some("d3*".into()));
        let est = scenario(b.scenario, b.noise_dims, seed).and_then(|s| {
            let pair = fit_bridge_pair(&data.table, &cfg.bridges, rng::derive(seed, COVERAGE_TAG))?;
            value_dr(&data.table, &pair, &pair, &s.d3_star_rule())
        });
        match est {
            Ok(v) => {
                let (lower, upper) = v.ci.expect("doubly robust estimates carry an interval");
                coverage = Some(CoverageRow {
                    replicate: r,
                    point: v.point,
                    se: v.se.unwrap_or(f64::NAN),
                    lower,
                    upper,
                    target,
                    covered: v.covers(target),
                });
                rec.values.push(NamedValue { policy: "d3*".into(), estimate: v });
            }
            Err(e) => {
                warn!("replicate {r} coverage: {e}");
                rec.fail(&e);
            }
        }
        rec.wall_clock_seconds = start.elapsed().as_secs_f64();
        records.push(rec);
    }
    info!("replicate {r} done");
    Replicate { records, coverage }
}

/// Runs the replicate loop and writes `results.csv`, `summary.csv`,
/// `references.csv`, `records.jsonl` and, with coverage on, `coverage.csv`.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let b = &cfg.benchmark;
    let s = build_scenario(b.scenario, b.noise_dims, rng::derive(cfg.seed, TEST_SET_TAG))?;
    let test = s.noise_free_testset(b.test_n)?;
    let references = reference_values(&s, &test)?;
    let target = references[3].estimate.point;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let reps: Vec<Replicate> =
        pool.install(|| (0..b.replicates).into_par_iter().map(|r| run_replicate(cfg, r, &test, target)).collect());

    let records: Vec<ResultRecord> = reps.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let coverage: Vec<CoverageRow> = reps.iter().filter_map(|r| r.coverage.clone()).collect();
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    let exit_code = records.iter().filter_map(|r| r.error_code).max().unwrap_or(0);

    let mut long = Vec::new();
    let mut w = csv::Writer::from_path(cfg.out_path("results.csv"))?;
    w.write_record(["replicate", "learner", "value", "status"])?;
    for rec in records.iter().filter(|r| r.learner.as_deref() != Some("d3*")) {
        let learner = rec.learner.clone().unwrap_or_default();
        let value = rec.value(&learner).map(|v| v.point);
        w.write_record([
            rec.replicate.unwrap_or(0).to_string(),
            learner.clone(),
            value.map_or_else(String::new, |v| v.to_string()),
            if rec.error.is_some() { "failed".into() } else { "ok".into() },
        ])?;
        if let Some(v) = value {
            long.push((learner, v));
        }
    }
    w.flush()?;

    let order: Vec<String> = b.learners.iter().map(|l| l.to_string()).collect();
    let summary = summarize(&long, &order);
    let mut w = csv::Writer::from_path(cfg.out_path("summary.csv"))?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out_path("references.csv"))?;
    w.write_record(["policy", "value"])?;
    for r in &references {
        w.write_record([r.policy.clone(), r.estimate.point.to_string()])?;
    }
    w.flush()?;

    if b.coverage {
        let mut w = csv::Writer::from_path(cfg.out_path("coverage.csv"))?;
        for row in &coverage {
            w.serialize(row)?;
        }
        w.flush()?;
        let hits = coverage.iter().filter(|c| c.covered).count();
        info!("coverage {hits}/{} at target {target:.4}", coverage.len());
    }
    append_records(&cfg.out_path("records.jsonl"), &records)?;
    Ok(BenchmarkOutcome { records, summary, coverage, references, failures, exit_code })
}
