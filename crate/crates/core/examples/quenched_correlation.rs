//! Quenched future and past correlations of `cos(2 pi x)` under the noisy
//! doubling map, and tower correlations with their envelope fit.

use std::f64::consts::TAU;

use quenched::mapcore::MapFamily;
use quenched::noise::{NoiseModel, Realization};
use quenched::stats::{fit_stretched_exp, quenched_correlation, CorrelationParams, Direction, WindowPolicy};
use quenched::tower::{correlation_fiber_range, tower_correlation, ReturnLaw, Tower, TowerCorrelationParams, TowerSpec};

fn main() -> quenched::Result<()> {
    let family = MapFamily::doubling();
    let omega = Realization::new(11, NoiseModel::interval(1e-3)?);
    let phi = |x: &[f64]| (TAU * x[0]).cos();
    let params = CorrelationParams::new((0..10).collect(), 32, 10_000);
    for dir in [Direction::Future, Direction::Past] {
        let r = quenched_correlation(&family, &omega, &phi, &phi, &params, dir)?;
        println!("{dir:?}: C(0) = {:.3}, below noise from n = {:?}", r.series.points[0].value, r.first_below_noise());
    }

    let spec = TowerSpec::new(ReturnLaw::StretchedExp { c: 2f64.exp(), gamma: 1.0, upsilon: 1.0 }, 0, 60)?;
    let params = TowerCorrelationParams { ns: (0..=40).collect(), n_back: 400, samples: 20_000, density_tolerance: 0.05 };
    let (lo, hi) = correlation_fiber_range(&spec, &params);
    let tower = Tower::new(spec, lo, hi)?;
    let base = |_: f64, level: u32| if level == 0 { 1.0 } else { 0.0 };
    let r = tower_correlation(&tower, &base, &base, &params, Direction::Future)?;
    let fit = fit_stretched_exp(&r.series.upper_envelope(3.0), &WindowPolicy::default())?;
    println!("tower: upsilon = {:.3} in [{:.3}, {:.3}] over n in {:?}", fit.upsilon, fit.upsilon_ci[0], fit.upsilon_ci[1], fit.window);
    Ok(())
}
