// Outcome-bridge learner on `(L, Z)` and on `L` alone, scored against the
// oracle value on a noise-free test set.

use proxitr::bridges::CachedKernelFitter;
use proxitr::evaluate::value_oracle_noise_free;
use proxitr::policy::{learn_outcome, FeatureSet, PolicyTuning};
use proxitr::simgen::{scenario, ScenarioName};

pub fn run_example() -> proxitr::Result<()> {
    let s = scenario(ScenarioName::L1, 0, 1)?;
    let train = s.generate(800)?;
    let test = scenario(ScenarioName::L1, 0, 2)?.noise_free_testset(20_000)?;
    let fitter = CachedKernelFitter::default();
    let tuning = PolicyTuning::default();

    for features in [FeatureSet::LZ, FeatureSet::L] {
        let fit = learn_outcome(&train.table, &fitter, &tuning, features)?;
        let v = value_oracle_noise_free(&test.table, &test.truth, &fit.policy)?;
        println!(
            "rule on {:<3}  rho {:.1e}  cv value {:.3}  oracle value {:.3}",
            features.name(),
            fit.report.best_rho,
            fit.report.best_cv_value,
            v.point
        );
    }
    let best = value_oracle_noise_free(&test.table, &test.truth, &s.d1_star_rule())?;
    println!("analytic optimum on (L, Z): {:.3}", best.point);
    // Both runs shared one pair of full-data outcome bridges.
    println!("bridge fits cached: {}", fitter.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
