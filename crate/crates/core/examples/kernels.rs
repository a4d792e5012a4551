// Gaussian Gram matrices, bandwidth heuristics and how closely a Nyström
// map reproduces the exact Gram matrix as the landmark count grows.

use nalgebra::DMatrix;
use proxitr::kernels::{gram_sym, median_bandwidth, KernelSpec, NystromMap};
use proxitr::simgen::{scenario, ScenarioName};

pub fn run_example() -> proxitr::Result<()> {
    let g = scenario(ScenarioName::N1, 0, 3)?.generate(400)?;
    let x = g.table.wl();
    let gamma = median_bandwidth(&x, None)?;
    let k = KernelSpec::new(gamma, x.ncols())?;
    let exact = gram_sym(&k, &x)?;
    println!("median-heuristic gamma on (W, L): {gamma:.4}");

    for m in [10, 40, 160, 400] {
        let map = NystromMap::fit(&k, &x, m, 11)?;
        let phi = map.features(&x)?;
        let approx: DMatrix<f64> = &phi * phi.transpose();
        let err = (&approx - &exact).abs().max();
        println!("landmarks {m:>3}  rank {:>3}  max |K - PhiPhi'| = {err:.2e}", map.rank());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> proxitr::Result<()> {
    run_example()
}
