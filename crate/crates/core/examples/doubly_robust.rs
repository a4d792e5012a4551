// Doubly robust learning with cross-fitted bridges, and the influence
// function interval for the value of the best rule on `L`.

use proxitr::bridges::{fit_bridge_pair, BridgeTuning, CachedKernelFitter};
use proxitr::evaluate::{value_dr, value_oracle_noise_free, value_potential_mean};
use proxitr::policy::{learn_dr, PolicyTuning, Rule};
use proxitr::simgen::{scenario, ScenarioName};

pub fn run_example() -> proxitr::Result<()> {
    let s = scenario(ScenarioName::L1, 0, 12)?;
    let train = s.generate(1000)?;
    let test = scenario(ScenarioName::L1, 0, 13)?.noise_free_testset(20_000)?;

    let fit = learn_dr(&train.table, &CachedKernelFitter::default(), &PolicyTuning::default())?;
    let v = value_oracle_noise_free(&test.table, &test.truth, &fit.policy)?;
    println!("cross-fitted rule: rho {:.1e}  oracle value {:.3}", fit.report.best_rho, v.point);

    let d3 = s.d3_star_rule();
    let target = value_potential_mean(&test.truth, &d3.decide(&test.table)?)?.point;
    let pair = fit_bridge_pair(&train.table, &BridgeTuning::default(), 3)?;
    let est = value_dr(&train.table, &pair, &pair, &d3)?;
    let (lo, hi) = est.ci.expect("interval");
    println!(
        "value of the analytic rule on L: {:.3} (se {:.3}, 95% [{lo:.3}, {hi:.3}]), truth {target:.3}",
        est.point,
        est.se.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
