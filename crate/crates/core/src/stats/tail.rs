//! Monte Carlo estimate of the tail measures `m(Gamma_omega^n)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::series::DecaySeries;
use crate::error::{invalid, Error, Result};
use crate::mapcore::{MapFamily, PhasePoint};
use crate::noise::{sub_seed, tag, CounterRng, Realization};
use crate::orbit::iterate_summary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    /// Expansion threshold: averages of `log ||Df^{-1}||` must stay `<= -alpha`.
    pub alpha: f64,
    /// Recurrence threshold on averages of `-log dist_delta`.
    pub gamma: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailEstimate {
    pub per_omega: Vec<DecaySeries>,
    /// `omega`-average, the estimate of the product measure `(P x m)(Gamma^n)`.
    pub product: DecaySeries,
    pub horizon: usize,
    /// Samples redrawn after an exact critical hit.
    pub redrawn: usize,
}

/// Uniform point of the phase space for sample `i` of realization `omega`.
pub fn sample_point(family: &MapFamily, omega: &Realization, stream: u64, i: u64) -> PhasePoint {
    let key = sub_seed(sub_seed(omega.seed(), tag("sample"), i), stream, omega.offset() as u64);
    let mut rng = CounterRng::new(key);
    let u: Vec<f64> = (0..family.dim()).map(|_| rng.uniform()).collect();
    family.space.from_unit(&u)
}

/// Fraction of `samples` uniform points of each realization lying in the
/// tail set, on the grid `ns`, using orbits of length `horizon`.
pub fn estimate_tail_measure(
    family: &MapFamily,
    omegas: &[Realization],
    params: &TailParams,
    ns: &[u64],
    samples: usize,
    horizon: usize,
) -> Result<TailEstimate> {
    if omegas.is_empty() || samples == 0 {
        return invalid("tail estimation needs at least one realization and one sample");
    }
    if ns.iter().any(|&n| n as usize > horizon) {
        return invalid(format!("grid extends beyond the orbit horizon {horizon}"));
    }
    let jobs: Vec<(usize, usize)> = (0..omegas.len()).flat_map(|w| (0..samples).map(move |i| (w, i))).collect();
    let results: Vec<Result<(usize, usize)>> = jobs
        .par_iter()
        .map(|&(w, i)| {
            let omega = &omegas[w];
            let mut attempt = 0u64;
            loop {
                let x = sample_point(family, omega, tag("tail") ^ attempt, i as u64);
                match iterate_summary(family, omega, &x, horizon, params.delta, params.alpha, params.gamma) {
                    Ok(s) => return Ok((s.tail_index(), attempt as usize)),
                    Err(Error::CriticalHit(_)) if attempt < 16 => attempt += 1,
                    Err(e) => return Err(e),
                }
            }
        })
        .collect();
    let mut redrawn = 0;
    let mut tails = vec![Vec::with_capacity(samples); omegas.len()];
    for (&(w, _), r) in jobs.iter().zip(results) {
        let (t, a) = r?;
        redrawn += a;
        tails[w].push(t);
    }
    let per_omega: Vec<DecaySeries> = tails
        .iter()
        .enumerate()
        .map(|(w, ts)| {
            let mut s = DecaySeries::new("tail", w as i64);
            let m = ts.len() as f64;
            for &n in ns {
                let c = ts.iter().filter(|&&t| t >= n as usize).count() as f64;
                let p = c / m;
                s.push(n, p, (p * (1.0 - p) / m).sqrt(), ts.len() as u64, n as usize >= horizon);
            }
            s
        })
        .collect();
    let product = DecaySeries::average("tail_product", &per_omega).expect("nonempty");
    Ok(TailEstimate { per_omega, product, horizon, redrawn })
}
