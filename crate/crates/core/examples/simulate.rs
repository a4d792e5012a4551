// The four synthetic scenarios: constraint residuals, the arm share, and
// oracle values of the analytic rules on a noise-free test set.

use proxitr::evaluate::{value_oracle_decisions, value_oracle_noise_free};
use proxitr::simgen::{scenario, ScenarioName};
use proxitr::Arm;

pub fn run_example() -> proxitr::Result<()> {
    println!("scenario | residual | Pr(A=1) | V(d*)  | V(d1*) | V(d3*)");
    for name in ScenarioName::ALL {
        let s = scenario(name, 0, 2024)?;
        let test = s.noise_free_testset(50_000)?;
        let treated = test.table.arm_count(Arm::Treated) as f64 / test.n as f64;
        let global = value_oracle_decisions(&test.table, &test.truth, &test.d_star(&s))?.point;
        let d1 = value_oracle_noise_free(&test.table, &test.truth, &s.d1_star_rule())?.point;
        let d3 = value_oracle_noise_free(&test.table, &test.truth, &s.d3_star_rule())?.point;
        println!(
            "{name:>8} | {:.1e}  | {treated:.3}   | {global:.3}  | {d1:.3}  | {d3:.3}",
            s.constraints().max_abs()
        );
    }
    // Noise covariates draw from their own streams, so the core columns
    // are unchanged.
    let a = scenario(ScenarioName::L1, 0, 9)?.generate(5)?;
    let b = scenario(ScenarioName::L1, 3, 9)?.generate(5)?;
    assert_eq!(a.table.y(), b.table.y());
    println!("adding 3 noise columns leaves Y untouched: ok");
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
