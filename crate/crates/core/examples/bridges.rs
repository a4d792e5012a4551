// Fit kernel outcome and treatment bridges on simulated data and compare
// them with the analytic bridges of the generator.

use proxitr::bridges::{fit_bridge_pair, BridgeTuning, OutcomeModel, TreatmentModel};
use proxitr::simgen::{scenario, ScenarioName};
use proxitr::Arm;

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn run_example() -> proxitr::Result<()> {
    let s = scenario(ScenarioName::L1, 0, 5)?;
    let g = s.generate(600)?;
    let pair = fit_bridge_pair(&g.table, &BridgeTuning::default(), 17)?;
    for (arm_bridge, label) in [(&pair.outcome.treated, "h(+1)"), (&pair.outcome.control, "h(-1)")] {
        let r = &arm_bridge.report;
        println!("{label}: gamma {:.3}  s {}  on {} rows", r.best_gamma, r.best_s, r.rows);
    }

    // Pointwise errors are large because the bridge is only pinned down
    // through its conditional mean given Z. What the learners use is the
    // arm contrast and its sign.
    let (truth_h, truth_q) = (s.outcome_bridge(), s.treatment_bridge());
    let contrast = |m: &dyn OutcomeModel| -> proxitr::Result<Vec<f64>> {
        let (p, c) = (m.outcome_bridge(&g.table, Arm::Treated)?, m.outcome_bridge(&g.table, Arm::Control)?);
        Ok(p.iter().zip(c.iter()).map(|(a, b)| a - b).collect())
    };
    let (fit_c, true_c) = (contrast(&pair)?, contrast(&truth_h)?);
    let agree = fit_c.iter().zip(&true_c).filter(|(a, b)| (**a >= 0.0) == (**b >= 0.0)).count();
    let sd = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    println!(
        "outcome contrast: sd {:.3} fitted vs {:.3} analytic, rmse {:.3}, sign agreement {:.1}%",
        sd(&fit_c),
        sd(&true_c),
        rmse(&fit_c, &true_c),
        100.0 * agree as f64 / fit_c.len() as f64
    );
    for arm in [Arm::Treated, Arm::Control] {
        let fq = pair.treatment_bridge(&g.table, arm)?;
        let eq = truth_q.treatment_bridge(&g.table, arm)?;
        println!("{arm:?}: treatment bridge mean {:.3} (analytic {:.3})", fq.mean(), eq.mean());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
