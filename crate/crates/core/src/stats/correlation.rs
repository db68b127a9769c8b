//! Quenched future and past correlations on the phase space.
//!
//! The sample measure `mu_omega` is approximated by pushing Lebesgue forward
//! from the fibers `sigma^{-k} omega`, with `k` uniform over the last half of
//! `[0, n_back)`. In exact doubling arithmetic one bit is lost per step, so
//! noiseless doubling runs need `n_back + q n` well below 53.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::series::DecaySeries;
use crate::error::{invalid, Error, Result};
use crate::mapcore::{MapFamily, PhasePoint};
use crate::noise::{sub_seed, tag, CounterRng, Realization};

pub type Observable<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Future,
    Past,
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::Future => "future",
            Direction::Past => "past",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationParams {
    pub ns: Vec<u64>,
    /// Time step multiplier: the series is evaluated at `q n`.
    pub q: u64,
    pub n_back: usize,
    pub samples: usize,
    /// Histogram bins per axis for the stabilization check.
    pub bins: usize,
}

impl CorrelationParams {
    pub fn new(ns: Vec<u64>, n_back: usize, samples: usize) -> Self {
        Self { ns, q: 1, n_back, samples, bins: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub direction: Direction,
    /// `|C_omega(phi, psi, q n)|` with standard errors.
    pub series: DecaySeries,
    /// Signed covariance estimates.
    pub signed: Vec<f64>,
    /// L1 distance between the sample measures built with `n_back` and `n_back / 2`.
    pub defect: f64,
    /// Tolerance the defect is compared against (0.02 plus the sampling noise).
    pub defect_tolerance: f64,
    pub flagged: bool,
}

impl CorrelationResult {
    /// First `n` whose value is below three standard errors.
    pub fn first_below_noise(&self) -> Option<u64> {
        self.series.points.iter().find(|p| p.value < 3.0 * p.stderr).map(|p| p.n)
    }
}

/// Draws sample `i` of the approximate sample measure on the fiber `omega`.
pub fn sample_measure_point(
    family: &MapFamily,
    omega: &Realization,
    n_back: usize,
    stream: u64,
    i: u64,
) -> Result<PhasePoint> {
    for attempt in 0..16u64 {
        let mut rng = CounterRng::new(sub_seed(sub_seed(omega.seed(), stream, i), attempt, omega.offset() as u64));
        let lo = n_back / 2;
        let k = lo + rng.below((n_back - lo).max(1));
        let u: Vec<f64> = (0..family.dim()).map(|_| rng.uniform()).collect();
        let mut x = family.space.from_unit(&u);
        let mut hit = false;
        for j in 0..k {
            let t = omega.parameter_at(j as i64 - k as i64);
            if family.dist_to_critical(&x) == Some(0.0) {
                hit = true;
                break;
            }
            x = family.eval(&t, &x)?;
        }
        if !hit {
            return Ok(x);
        }
    }
    Err(Error::CriticalHit("sample measure push-forward kept hitting the critical set".into()))
}

fn push(family: &MapFamily, omega: &Realization, x: &PhasePoint, steps: u64) -> Result<PhasePoint> {
    let mut y = x.clone();
    for j in 0..steps {
        y = family.eval(&omega.parameter_at(j as i64), &y)?;
    }
    Ok(y)
}

fn covariance(phis: &[f64], psis: &[f64]) -> (f64, f64) {
    let m = phis.len() as f64;
    let mp = phis.iter().sum::<f64>() / m;
    let mq = psis.iter().sum::<f64>() / m;
    let us: Vec<f64> = phis.iter().zip(psis).map(|(a, b)| (a - mp) * (b - mq)).collect();
    let cov = us.iter().sum::<f64>() / m;
    let var = us.iter().map(|u| (u - cov).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (cov, (var / m).sqrt())
}

/// L1 distance between binned sample sets, and its expected sampling level.
fn histogram_defect(family: &MapFamily, a: &[PhasePoint], b: &[PhasePoint], bins: usize) -> (f64, f64) {
    let dim = family.dim().min(2);
    let cells = bins.pow(dim as u32);
    let index = |p: &PhasePoint| {
        let mut idx = 0;
        for k in 0..dim {
            let (lo, hi) = family.space.bounds[k];
            let u = ((p[k] - lo) / (hi - lo)).clamp(0.0, 1.0 - 1e-12);
            idx = idx * bins + (u * bins as f64) as usize;
        }
        idx
    };
    let hist = |s: &[PhasePoint]| {
        let mut h = vec![0.0; cells];
        for p in s {
            h[index(p)] += 1.0 / s.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let defect = ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum();
    let m = a.len().min(b.len()) as f64;
    let noise = ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| {
            let p = 0.5 * (x + y);
            (2.0 * p * (1.0 - p) / m).sqrt() * (2.0 / std::f64::consts::PI).sqrt()
        })
        .sum::<f64>();
    (defect, noise)
}

/// Estimates `C_omega^+(phi, psi, mu, q n)` or its past counterpart on the grid.
pub fn quenched_correlation(
    family: &MapFamily,
    omega: &Realization,
    phi: Observable<'_>,
    psi: Observable<'_>,
    params: &CorrelationParams,
    direction: Direction,
) -> Result<CorrelationResult> {
    if params.samples < 2 || params.n_back < 2 || params.q == 0 {
        return invalid("correlation needs >= 2 samples, n_back >= 2 and q >= 1");
    }
    let m = params.samples;
    let stream = tag("correlation");
    let (phi_vals, psi_vals): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match direction {
        Direction::Future => {
            let max_n = params.ns.iter().max().copied().unwrap_or(0) * params.q;
            let rows: Vec<Result<(Vec<f64>, f64)>> = (0..m)
                .into_par_iter()
                .map(|i| {
                    let x = sample_measure_point(family, omega, params.n_back, stream, i as u64)?;
                    let psi_x = psi(&x);
                    let mut out = Vec::with_capacity(params.ns.len());
                    let mut y = x;
                    let mut at = 0u64;
                    for &n in &params.ns {
                        let target = n * params.q;
                        while at < target.min(max_n) {
                            y = family.eval(&omega.parameter_at(at as i64), &y)?;
                            at += 1;
                        }
                        out.push(phi(&y));
                    }
                    Ok((out, psi_x))
                })
                .collect();
            let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
            let k = params.ns.len();
            let mut phis = vec![Vec::with_capacity(m); k];
            let psis_one: Vec<f64> = rows.iter().map(|r| r.1).collect();
            for r in &rows {
                for (j, v) in r.0.iter().enumerate() {
                    phis[j].push(*v);
                }
            }
            (phis, vec![psis_one; k])
        }
        Direction::Past => {
            let mut phis = Vec::with_capacity(params.ns.len());
            let mut psis = Vec::with_capacity(params.ns.len());
            for &n in &params.ns {
                let steps = n * params.q;
                let base = omega.shift(-(steps as i64));
                let rows: Vec<Result<(f64, f64)>> = (0..m)
                    .into_par_iter()
                    .map(|i| {
                        let x = sample_measure_point(family, &base, params.n_back, stream, i as u64)?;
                        let y = push(family, &base, &x, steps)?;
                        Ok((phi(&y), psi(&x)))
                    })
                    .collect();
                let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
                phis.push(rows.iter().map(|r| r.0).collect());
                psis.push(rows.iter().map(|r| r.1).collect());
            }
            (phis, psis)
        }
    };

    let mut series = DecaySeries::new(format!("correlation_{}", direction.label()), omega.offset());
    let mut signed = Vec::with_capacity(params.ns.len());
    for (j, &n) in params.ns.iter().enumerate() {
        let (cov, se) = covariance(&phi_vals[j], &psi_vals[j]);
        signed.push(cov);
        series.push(n, cov.abs(), se, m as u64, false);
    }

    // stabilization: compare against the measure built with half the depth
    let check = m.min(20_000);
    let full: Vec<PhasePoint> = (0..check)
        .into_par_iter()
        .map(|i| sample_measure_point(family, omega, params.n_back, tag("stability_full"), i as u64))
        .collect::<Result<_>>()?;
    let half: Vec<PhasePoint> = (0..check)
        .into_par_iter()
        .map(|i| sample_measure_point(family, omega, (params.n_back / 2).max(2), tag("stability_half"), i as u64))
        .collect::<Result<_>>()?;
    let (defect, noise) = histogram_defect(family, &full, &half, params.bins);
    let defect_tolerance = 0.02 + 1.5 * noise;
    Ok(CorrelationResult { direction, series, signed, defect, defect_tolerance, flagged: defect > defect_tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseModel;
    use std::f64::consts::TAU;

    fn doubling_omega() -> Realization {
        Realization::new(11, NoiseModel::interval(1e-3).unwrap())
    }

    #[test]
    fn constant_psi_gives_zero() {
        let f = MapFamily::doubling();
        let phi = |x: &[f64]| (TAU * x[0]).cos();
        let psi = |_: &[f64]| 2.0;
        let p = CorrelationParams::new(vec![0, 1, 2], 32, 2000);
        let r = quenched_correlation(&f, &doubling_omega(), &phi, &psi, &p, Direction::Future).unwrap();
        assert!(r.series.values().iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn doubling_decorrelates_quickly() {
        let f = MapFamily::doubling();
        let phi = |x: &[f64]| (TAU * x[0]).cos();
        let p = CorrelationParams::new((0..8).collect(), 32, 10_000);
        for dir in [Direction::Future, Direction::Past] {
            let r = quenched_correlation(&f, &doubling_omega(), &phi, &phi, &p, dir).unwrap();
            assert!((r.series.points[0].value - 0.5).abs() < 0.03, "{:?}", r.series.points[0]);
            assert!(r.first_below_noise().is_some_and(|n| n <= 3), "{dir:?}");
            assert!(!r.flagged, "defect {} > {}", r.defect, r.defect_tolerance);
        }
    }
}
