use std::path::Path;
use std::process::Command;

use proxitr::cli::{
    cmd_benchmark, cmd_evaluate, cmd_fit, cmd_simulate, quantile_sorted, read_records, LearnerChoice, ModelFile,
    RunConfig,
};
use proxitr::evaluate::Estimator;
use proxitr::io::read_table_file;
use proxitr::policy::{Branch, Rule};
use proxitr::simgen::ScenarioName;
use proxitr::Error;

fn config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig { seed: 7, out: out.to_path_buf(), ..Default::default() };
    cfg.simulate.n = 100;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_proxitr"))
}

#[test]
fn simulate_is_byte_identical_with_documented_header() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_simulate(&config(a.path())).unwrap();
    cmd_simulate(&config(b.path())).unwrap();
    for f in ["data.csv", "truth.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let text = std::fs::read_to_string(a.path().join("data.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "L1,L2,Z1,W1,A,Y");
    assert_eq!(text.lines().count(), 101);
    let truth = std::fs::read_to_string(a.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().next().unwrap(), "U,mu_Y,prop_true,mu_plus,mu_minus");
}

#[test]
fn saved_policy_reloads_to_identical_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.simulate.scenario = ScenarioName::L2;
    cfg.simulate.n = 300;
    cfg.fit.learner = LearnerChoice::OutcomeLZ;
    cmd_simulate(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();
    let data = read_table_file(&dir.path().join("data.csv")).unwrap();
    let model = ModelFile::load(&dir.path().join("model.json")).unwrap();
    assert_eq!(model.training_rows, 300);
    assert!(!model.bridges.is_empty());
    // Refitting in memory gives the same rule as the one on disk.
    let cache = proxitr::bridges::CachedKernelFitter::new(cfg.bridges.clone());
    let tuning = proxitr::policy::PolicyTuning {
        seed: proxitr::rng::derive(cfg.seed, cfg.policy.seed),
        ..cfg.policy.clone()
    };
    let fresh = proxitr::cli::train(LearnerChoice::OutcomeLZ, &data, &cache, &tuning).unwrap();
    assert_eq!(model.learned.policy.decide(&data).unwrap(), fresh.policy.decide(&data).unwrap());
    assert_eq!(model.learned.policy.scores(&data).unwrap(), fresh.policy.scores(&data).unwrap());
}

#[test]
fn maximum_record_names_winner_and_its_cv_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.simulate.n = 300;
    cfg.fit.learner = LearnerChoice::Maximum;
    cmd_simulate(&cfg).unwrap();
    let rec = cmd_fit(&cfg).unwrap();
    let report: proxitr::policy::LearnerReport =
        serde_json::from_value(rec.tuning.unwrap()["policy"].clone()).unwrap();
    let (o, t) = (&report.branches[0], &report.branches[1]);
    let expect = if o.best_cv_value >= t.best_cv_value { Branch::Outcome } else { Branch::Treatment };
    assert_eq!(report.winner, Some(expect));
    assert_eq!(report.best_cv_value, o.best_cv_value.max(t.best_cv_value));
    // The recorded branch values are the maxima of their own CV curves.
    for b in [o, t] {
        let best = b.cv_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(b.best_cv_value, best);
    }
}

#[test]
fn malformed_treatment_code_cites_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "L1,L2,Z1,W1,A,Y\n0,0,0,0,1,1\n0,0,0,0,-1,2\n1,1,1,1,2,3\n").unwrap();
    let mut cfg = config(dir.path());
    cfg.fit.data = Some(path.clone());
    match cmd_fit(&cfg) {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "A")),
        other => panic!("{other:?}"),
    }
    let out = bin().args(["fit", "--out"]).arg(dir.path()).arg("--config").arg(write_cfg(dir.path(), &path)).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));
}

fn write_cfg(dir: &Path, data: &Path) -> std::path::PathBuf {
    let p = dir.join("fit.toml");
    std::fs::write(&p, format!("[fit]\ndata = {:?}\n", data.to_str().unwrap())).unwrap();
    p
}

#[test]
fn evaluate_reports_identified_and_oracle_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.simulate.n = 300;
    cfg.simulate.test_n = 3000;
    cfg.fit.learner = LearnerChoice::DoublyRobust;
    cmd_simulate(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();
    let rec = cmd_evaluate(&cfg).unwrap();
    let kinds: Vec<Estimator> = rec.values.iter().map(|v| v.estimate.estimator).collect();
    assert_eq!(
        kinds,
        [
            Estimator::Outcome,
            Estimator::Treatment,
            Estimator::DoublyRobust,
            Estimator::OracleNoiseFree,
            Estimator::OraclePotentialMean
        ]
    );
    let dr = &rec.values[2].estimate;
    assert!(dr.ci.is_some() && dr.se.unwrap() > 0.0);
    // All values land in the range of the scenario's policy values.
    for v in &rec.values {
        assert!(v.estimate.point > 4.5 && v.estimate.point < 7.5, "{v:?}");
    }
    assert_eq!(read_records(&dir.path().join("records.jsonl")).unwrap().len(), 2);
}

#[test]
fn benchmark_summary_matches_long_table_and_regenerates() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |out: &Path, workers: usize| {
        let mut cfg = config(out);
        cfg.workers = workers;
        cfg.benchmark.replicates = 3;
        cfg.benchmark.n = 300;
        cfg.benchmark.test_n = 5000;
        cfg.benchmark.learners = vec![LearnerChoice::OutcomeLZ, LearnerChoice::TreatmentL];
        cmd_benchmark(&cfg).unwrap()
    };
    let first = run(a.path(), 1);
    let second = run(b.path(), 2);
    assert_eq!(first.failures, 0);
    assert_eq!(first.summary, second.summary);
    let strip = |r: &[proxitr::cli::ResultRecord]| r.iter().map(|x| x.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&first.records), strip(&second.records));
    assert_eq!(
        std::fs::read(a.path().join("results.csv")).unwrap(),
        std::fs::read(b.path().join("results.csv")).unwrap()
    );

    // Independent aggregation of the long table.
    let mut rdr = csv::Reader::from_path(a.path().join("results.csv")).unwrap();
    let mut by: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        by.entry(rec[1].to_string()).or_default().push(rec[2].parse().unwrap());
    }
    for row in &first.summary {
        let mut v = by[&row.learner].clone();
        v.sort_by(f64::total_cmp);
        assert_eq!(row.median, quantile_sorted(&v, 0.5));
        assert_eq!(row.q1, quantile_sorted(&v, 0.25));
        assert_eq!(row.q3, quantile_sorted(&v, 0.75));
    }
    let on_disk = read_records(&a.path().join("records.jsonl")).unwrap();
    assert_eq!(strip(&on_disk), strip(&first.records));
}

#[test]
fn one_replicate_gives_a_one_row_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["benchmark", "--n", "500", "--learner", "d1", "--seed", "3", "--out"])
        .arg(dir.path())
        .env("PROXITR_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("d1,1,"));
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[simulate]\nscenario = \"L1\"\nsize = 3\n").unwrap();
    let code = |args: &[&str]| bin().args(args).arg("--out").arg(dir.path()).output().unwrap().status.code();
    assert_eq!(code(&["simulate", "--config", bad.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["simulate", "--scenario", "Q7"]), Some(2));
    assert_eq!(code(&["fit", "--learner", "d9"]), Some(2));
    // No data file yet.
    assert_eq!(code(&["fit"]), Some(3));
    assert_eq!(code(&["simulate", "--n", "20"]), Some(0));
    // Too few rows for nested cross-fitting is a numeric failure.
    assert_eq!(code(&["fit", "--learner", "d3dr"]), Some(4));
}
