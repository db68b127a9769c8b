//! Random orbit of the Misiurewicz quadratic map: expansion and recurrence
//! times, hyperbolic times and the pre-ball at the first one.

use quenched::hyperbolic::{build_preball, hyperbolic_times, HyperbolicParams};
use quenched::mapcore::{misiurewicz_parameter, MapFamily, PhasePoint};
use quenched::noise::{NoiseModel, Realization};
use quenched::orbit::{expansion_time, iterate_record, recurrence_time};

fn main() -> quenched::Result<()> {
    let eps = 1e-3;
    let family = MapFamily::unimodal(misiurewicz_parameter(), eps)?;
    let omega = Realization::new(7, NoiseModel::interval(eps)?);
    let x0 = PhasePoint::scalar(0.3);
    let record = iterate_record(&family, &omega, &x0, 400, 0.01)?;

    println!("expansion time (alpha = 0.05): {:?}", expansion_time(&record, 0.05)?);
    println!("recurrence time (gamma = 3):   {:?}", recurrence_time(&record, 3.0)?);

    let params = HyperbolicParams::from_log_rate(-0.2, 0.49)?;
    let set = hyperbolic_times(&record, &params);
    let head = &set.times[..set.times.len().min(10)];
    println!("{} hyperbolic times; first few: {head:?}", set.times.len());

    if let Some(&n) = set.times.first() {
        let pb = build_preball(&family, &omega, &x0, n, 0.05, &params)?;
        println!("pre-ball at n = {n}: {:?}, distortion {:.3}, covers image: {}", pb.region, pb.distortion, pb.covers_image);
    }
    Ok(())
}
