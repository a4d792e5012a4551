// The batch commands end to end in a scratch directory: simulate, fit,
// evaluate and a two-replicate benchmark.

use proxitr::cli::{cmd_benchmark, cmd_evaluate, cmd_fit, cmd_simulate, LearnerChoice, RunConfig};
use proxitr::simgen::ScenarioName;

pub fn run_example() -> proxitr::Result<()> {
    let dir = std::env::temp_dir().join(format!("proxitr-pipeline-{}", std::process::id()));
    let mut cfg = RunConfig { seed: 7, out: dir.clone(), ..Default::default() };
    cfg.simulate.scenario = ScenarioName::L2;
    cfg.simulate.n = 400;
    cfg.simulate.test_n = 5000;
    cfg.fit.learner = LearnerChoice::Maximum;
    cfg.evaluate.bridge_rows = 1000;

    let manifest = cmd_simulate(&cfg)?;
    println!("simulated {} rows, columns {}", manifest.n, manifest.header.join(","));
    let fit = cmd_fit(&cfg)?;
    let winner = &fit.tuning.as_ref().expect("fit records tuning")["policy"]["winner"];
    println!("fitted d4, winning branch {winner}");
    for v in cmd_evaluate(&cfg)?.values {
        println!("  {:?}: {:.3}", v.estimate.estimator, v.estimate.point);
    }

    cfg.benchmark.scenario = ScenarioName::L2;
    cfg.benchmark.replicates = 2;
    cfg.benchmark.n = 400;
    cfg.benchmark.test_n = 5000;
    cfg.benchmark.learners = vec![LearnerChoice::OutcomeLZ, LearnerChoice::TreatmentLW];
    let bench = cmd_benchmark(&cfg)?;
    for row in &bench.summary {
        println!("{}: median {:.3} over {} replicates", row.learner, row.median, row.count);
    }
    println!("outputs in {}", dir.display());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
