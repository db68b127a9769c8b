//! Induced partition of a reference ball for the noisy doubling map, its
//! return-time tail and the gcd condition.

use quenched::gmy::{check_gcd_condition, construct_partition, return_tail_window, return_time_tail, GmyParams, ReferenceBall};
use quenched::hyperbolic::HyperbolicParams;
use quenched::mapcore::MapFamily;
use quenched::noise::{NoiseModel, Realization};
use quenched::stats::fit_stretched_exp;

fn main() -> quenched::Result<()> {
    let eps = 1e-3;
    let family = MapFamily::doubling();
    let ball = ReferenceBall::new(0.5 + 1.0 / 256.0, 1.0 / 128.0, 0, 1.0)?;
    let params = GmyParams::new(HyperbolicParams::new(0.6, 0.49)?, 1.0, 0.375);
    let horizon = 16;
    let parts = (0..3)
        .map(|s| construct_partition(&family, &Realization::new(s, NoiseModel::interval(eps)?), &ball, horizon, &params))
        .collect::<quenched::Result<Vec<_>>>()?;
    for p in &parts {
        println!(
            "omega {}: {} elements, unreturned mass {:.2e}, accounting error {:.1e}, disjoint {}",
            p.omega.seed(),
            p.elements.len(),
            p.remainder_mass,
            p.mass_accounting_error(),
            p.is_disjoint()
        );
    }
    let ns: Vec<u64> = (0..=horizon as u64).collect();
    let tail = return_time_tail(&parts, &ns)?;
    let fit = fit_stretched_exp(&tail.mean, &return_tail_window())?;
    println!("m(R > n): upsilon = {:.3}, gamma = {:.3}, R^2 = {:.5}", fit.upsilon, fit.gamma, fit.r2);
    println!("{:?}", check_gcd_condition(&parts)?);
    Ok(())
}
