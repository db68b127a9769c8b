//! Frequency of hyperbolic times along random orbits of a Viana map.

use quenched::hyperbolic::{hyperbolic_frequency, HyperbolicParams};
use quenched::mapcore::{misiurewicz_parameter, MapFamily};
use quenched::noise::{NoiseModel, Realization};
use quenched::orbit::iterate_record;
use quenched::stats::tail::sample_point;

fn main() -> quenched::Result<()> {
    let eps = 1e-3;
    let family = MapFamily::viana(16, 0.01, misiurewicz_parameter(), eps)?;
    let omega = Realization::new(3, NoiseModel::interval(eps)?);
    let records = (0..50)
        .map(|i| iterate_record(&family, &omega, &sample_point(&family, &omega, 0, i), 1000, 0.05))
        .collect::<quenched::Result<Vec<_>>>()?;
    let params = HyperbolicParams::from_log_rate(-0.01, 0.49)?;
    let stats = hyperbolic_frequency(&records, &params, 0.01, 3.0, 0.01)?;
    println!(
        "{} eligible orbits: mean frequency {:.4}, min {:.4}, positive on {:.1}%",
        stats.eligible,
        stats.mean,
        stats.min,
        100.0 * stats.fraction_positive
    );
    Ok(())
}
