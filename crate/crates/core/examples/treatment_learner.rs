// Treatment-bridge learner on `(L, W)` with the linear and the kernel
// decision class.

use proxitr::bridges::CachedKernelFitter;
use proxitr::evaluate::value_oracle_noise_free;
use proxitr::policy::{learn_treatment, FeatureSet, FunctionClass, PolicyTuning};
use proxitr::simgen::{scenario, ScenarioName};

pub fn run_example() -> proxitr::Result<()> {
    let train = scenario(ScenarioName::N1, 0, 4)?.generate(800)?;
    let test = scenario(ScenarioName::N1, 0, 5)?.noise_free_testset(20_000)?;
    let fitter = CachedKernelFitter::default();

    for class in [FunctionClass::Linear, FunctionClass::Kernel { rank: Some(60) }] {
        let tuning = PolicyTuning { class, ..Default::default() };
        let fit = learn_treatment(&train.table, &fitter, &tuning, FeatureSet::LW)?;
        let v = value_oracle_noise_free(&test.table, &test.truth, &fit.policy)?;
        println!("{class:?}: rho {:.1e}  oracle value {:.3}", fit.report.best_rho, v.point);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
