// The maximum learner keeps whichever of the outcome and treatment rules
// has the larger cross-validated value.

use proxitr::bridges::CachedKernelFitter;
use proxitr::policy::{learn_maximum, PolicyTuning};
use proxitr::simgen::{scenario, ScenarioName};

pub fn run_example() -> proxitr::Result<()> {
    let train = scenario(ScenarioName::L2, 0, 8)?.generate(800)?;
    let fitter = CachedKernelFitter::default();
    let tuning = PolicyTuning::default();
    let fit = learn_maximum(&train.table, &fitter, &tuning, &tuning)?;
    for b in &fit.report.branches {
        println!("{:?} on {}: cv value {:.3}", b.learner, b.features.name(), b.best_cv_value);
    }
    println!("winner: {:?}", fit.report.winner.expect("two branches ran"));
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
