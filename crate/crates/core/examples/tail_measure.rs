//! Tail measure `m(Gamma^n)` of the intermittent torus map under noise, with
//! a stretched-exponential fit; the noiseless doubling map has no tail.

use quenched::mapcore::MapFamily;
use quenched::noise::{NoiseModel, Realization};
use quenched::stats::{estimate_tail_measure, fit_stretched_exp, log_grid, TailParams, WindowPolicy};

fn main() -> quenched::Result<()> {
    let doubling = MapFamily::doubling();
    let omegas: Vec<_> = (0..2).map(|s| Realization::new(s, NoiseModel::interval(0.0).unwrap())).collect();
    let params = TailParams { alpha: 0.5, gamma: f64::INFINITY, delta: 0.1 };
    let est = estimate_tail_measure(&doubling, &omegas, &params, &[0, 1, 5, 20], 500, 20)?;
    println!("doubling, eps = 0: {:?}", est.product.values());

    let eps = 0.05;
    let torus = MapFamily::torus_nue(2, 0.5)?;
    let omegas: Vec<_> = (0..4).map(|s| Realization::new(s, NoiseModel::ball(eps, 2).unwrap())).collect();
    let mut ns = vec![0];
    ns.extend(log_grid(1, 500, 15));
    let est = estimate_tail_measure(&torus, &omegas, &params, &ns, 500, 500)?;
    let fit = fit_stretched_exp(&est.product, &WindowPolicy::default())?;
    println!(
        "torus_nue, eps = {eps}: upsilon = {:.3} in [{:.3}, {:.3}], R^2 = {:.4}, window {:?}",
        fit.upsilon, fit.upsilon_ci[0], fit.upsilon_ci[1], fit.r2, fit.window
    );
    Ok(())
}
