// The three identified value functionals agree with each other and with
// the oracle when the bridges are the analytic ones.

use proxitr::evaluate::{value_dr, value_oracle_ipw, value_outcome, value_treatment};
use proxitr::policy::{constant_rule, FeatureSet, FnRule};
use proxitr::simgen::{scenario, ScenarioName};
use proxitr::{Arm, SampleTable};

pub fn run_example() -> proxitr::Result<()> {
    let s = scenario(ScenarioName::L1, 0, 21)?;
    let g = s.generate(100_000)?;
    let (h, q) = (s.outcome_bridge(), s.treatment_bridge());
    let first_covariate = FnRule {
        features: FeatureSet::L,
        rule: |d: &SampleTable| Ok((0..d.n()).map(|i| Arm::from_score(d.l()[(i, 0)] - 0.25)).collect()),
    };
    let d3 = s.d3_star_rule();
    let treat_all = constant_rule(Arm::Treated);
    let rules: [(&str, &dyn proxitr::policy::Rule); 3] =
        [("treat all", &treat_all), ("sign(L1 - 0.25)", &first_covariate), ("analytic optimum", &d3)];
    println!("{:<18} {:>8} {:>9} {:>8} {:>8}", "rule", "outcome", "treatment", "dr", "oracle");
    for (label, rule) in rules {
        let dr = value_dr(&g.table, &h, &q, rule)?;
        println!(
            "{label:<18} {:>8.3} {:>9.3} {:>8.3} {:>8.3}  (dr se {:.3})",
            value_outcome(&g.table, &h, rule)?.point,
            value_treatment(&g.table, &q, rule)?.point,
            dr.point,
            value_oracle_ipw(&g.table, &g.truth, rule)?.point,
            dr.se.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
