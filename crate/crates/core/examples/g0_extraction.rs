//! Waiting index `g0(omega)` of random fields against the threshold
//! `sqrt(C) e^{-(gamma/2) n^upsilon}`.

use quenched::stats::g0::{envelope_field, geometric_onset_field, EnvelopeParams};
use quenched::stats::ks::ks_distance_discrete;
use quenched::stats::extract_g0;

fn main() -> quenched::Result<()> {
    let params = EnvelopeParams::new(0.5, 0.5, 0.5)?;
    let grid: Vec<u64> = (0..=200).collect();

    let field = envelope_field(1000, &grid, &params, 5);
    let report = extract_g0(&field, &params)?;
    let worst = report.tail.points.iter().map(|p| p.value / params.threshold(p.n)).fold(0.0, f64::max);
    println!("envelope field: P(g0 > n) / threshold <= {worst:.3}, censored {:.3}", report.censored_fraction);

    let p = 0.2;
    let (field, _) = geometric_onset_field(p, 1000, &grid, &params, 5)?;
    let report = extract_g0(&field, &params)?;
    let ks = ks_distance_discrete(&report.resolved_values(), |k| 1.0 - (1.0 - p).powi(k as i32 + 1), 200);
    println!("geometric onset field: KS distance to Geom({p}) = {ks:.4}");
    Ok(())
}
