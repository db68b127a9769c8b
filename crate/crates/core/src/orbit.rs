//! Random orbits, expansion and recurrence times, tail sets and the
//! deep-return profile of quadratic maps.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mapcore::{dist_delta, FamilyKind, MapFamily, PhasePoint};
use crate::noise::Realization;

/// Orbits longer than this keep only the per-step sequences, not the points.
pub const FULL_STORAGE_LIMIT: usize = 100_000;

/// A time function value certified only up to the record horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeValue {
    At(u64),
    ExceedsHorizon,
}

impl TimeValue {
    /// `true` iff the value is strictly greater than `n`.
    pub fn exceeds(&self, n: u64) -> bool {
        match *self {
            TimeValue::At(v) => v > n,
            TimeValue::ExceedsHorizon => true,
        }
    }
}

/// A random orbit `f_omega^j(x0)` with its per-step expansion and recurrence samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub x0: PhasePoint,
    pub omega: Realization,
    pub delta: f64,
    /// `f_omega^j(x0)` for `j = 0..=n`; `None` past [`FULL_STORAGE_LIMIT`].
    pub points: Option<Vec<PhasePoint>>,
    /// `log ||Df(f_omega^j x0)^{-1}||`, `j < n`.
    pub log_inv_norm: Vec<f64>,
    /// `-log dist_delta(f_omega^j x0, C)`, `j < n`; empty without critical set.
    pub log_trunc_dist: Vec<f64>,
}

impl OrbitRecord {
    pub fn len(&self) -> usize {
        self.log_inv_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_inv_norm.is_empty()
    }
}

/// Iterates `n` steps of the random orbit of `x0` under `omega`.
///
/// An exact hit of the critical set returns [`Error::CriticalHit`]; callers
/// resample (the event has probability zero).
pub fn iterate_record(
    family: &MapFamily,
    omega: &Realization,
    x0: &PhasePoint,
    n: usize,
    delta: f64,
) -> Result<OrbitRecord> {
    if !family.space.contains(x0) {
        return invalid(format!("starting point {x0} is outside the phase space"));
    }
    if !(delta > 0.0) {
        return invalid(format!("delta must be positive, got {delta}"));
    }
    let critical = family.critical.is_some();
    let keep = n <= FULL_STORAGE_LIMIT;
    let mut points = keep.then(|| Vec::with_capacity(n + 1));
    let mut lin = Vec::with_capacity(n);
    let mut ltd = Vec::with_capacity(if critical { n } else { 0 });
    let mut x = x0.clone();
    for j in 0..n {
        let t = omega.parameter_at(j as i64);
        if let Some(p) = points.as_mut() {
            p.push(x.clone());
        }
        step_samples(family, &t, &x, delta, j, &mut lin, &mut ltd)?;
        x = family.eval(&t, &x).map_err(|e| with_step(e, j))?;
    }
    if let Some(p) = points.as_mut() {
        p.push(x);
    }
    Ok(OrbitRecord { x0: x0.clone(), omega: *omega, delta, points, log_inv_norm: lin, log_trunc_dist: ltd })
}

fn step_samples(
    family: &MapFamily,
    t: &[f64],
    x: &PhasePoint,
    delta: f64,
    j: usize,
    lin: &mut Vec<f64>,
    ltd: &mut Vec<f64>,
) -> Result<()> {
    let norm = family.jacobian_inverse_norm(t, x).map_err(|e| {
        if matches!(e, Error::CriticalHit(_)) {
            warn!("orbit hit the critical set at step {j}; sample must be redrawn");
        }
        with_step(e, j)
    })?;
    lin.push(norm.ln());
    if let Some(d) = family.dist_to_critical(x) {
        ltd.push(-dist_delta(d, delta).ln());
    }
    Ok(())
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::DomainEscape { detail, .. } => Error::DomainEscape { step: step as u64, detail },
        other => other,
    }
}

/// Largest `m` in `1..=n` with `(1/m) sum_{j<m} seq[j] > threshold`, or 0.
///
/// Prefix sums are accumulated left to right so that every average is the
/// same float a direct evaluation produces.
pub fn last_violation(seq: &[f64], threshold: f64) -> usize {
    let mut sum = 0.0;
    let mut last = 0;
    for (i, v) in seq.iter().enumerate() {
        sum += v;
        let m = i + 1;
        if sum / m as f64 > threshold {
            last = m;
        }
    }
    last
}

fn time_from_violation(last: usize, n: usize) -> TimeValue {
    if n > 0 && last == n {
        TimeValue::ExceedsHorizon
    } else {
        TimeValue::At(last as u64 + 1)
    }
}

/// Expansion time of a `log ||Df^{-1}||` sequence: the least `N >= 1` with
/// every average over `[0, m)`, `N <= m <= n`, at most `-alpha`.
pub fn expansion_time_of(log_inv_norm: &[f64], alpha: f64) -> TimeValue {
    time_from_violation(last_violation(log_inv_norm, -alpha), log_inv_norm.len())
}

/// Recurrence time of a `-log dist_delta` sequence: the least `N >= 1` with
/// every average over `[0, m)`, `N <= m <= n`, at most `gamma`.
pub fn recurrence_time_of(log_trunc_dist: &[f64], gamma: f64) -> TimeValue {
    time_from_violation(last_violation(log_trunc_dist, gamma), log_trunc_dist.len())
}

pub fn expansion_time(record: &OrbitRecord, alpha: f64) -> Result<TimeValue> {
    if record.is_empty() {
        return invalid("expansion time needs a record of length >= 1");
    }
    Ok(expansion_time_of(&record.log_inv_norm, alpha))
}

pub fn recurrence_time(record: &OrbitRecord, gamma: f64) -> Result<TimeValue> {
    if record.is_empty() {
        return invalid("recurrence time needs a record of length >= 1");
    }
    if record.log_trunc_dist.is_empty() {
        return invalid("recurrence time is undefined for a family without critical set");
    }
    Ok(recurrence_time_of(&record.log_trunc_dist, gamma))
}

/// Whether the orbit's starting point lies in the tail set at time `n`.
/// Recurrence is ignored when the critical set is empty.
pub fn tail_membership(record: &OrbitRecord, alpha: f64, gamma: f64, n: usize) -> Result<bool> {
    if n > record.len() {
        return invalid(format!("tail time {n} beyond record length {}", record.len()));
    }
    let n = n as u64;
    let e = expansion_time(record, alpha)?;
    if e.exceeds(n) {
        return Ok(true);
    }
    if record.log_trunc_dist.is_empty() {
        return Ok(false);
    }
    Ok(recurrence_time(record, gamma)?.exceeds(n))
}

/// Constant-memory orbit statistics: the point lies in the tail set at time
/// `n` iff `n <= tail_index`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSummary {
    pub horizon: usize,
    pub last_expansion_violation: usize,
    pub last_recurrence_violation: usize,
    pub sum_log_inv_norm: f64,
}

impl OrbitSummary {
    pub fn tail_index(&self) -> usize {
        self.last_expansion_violation.max(self.last_recurrence_violation)
    }

    pub fn expansion_time(&self) -> TimeValue {
        time_from_violation(self.last_expansion_violation, self.horizon)
    }

    pub fn recurrence_time(&self) -> TimeValue {
        time_from_violation(self.last_recurrence_violation, self.horizon)
    }
}

/// Streaming counterpart of [`iterate_record`] followed by the time functions.
pub fn iterate_summary(
    family: &MapFamily,
    omega: &Realization,
    x0: &PhasePoint,
    n: usize,
    delta: f64,
    alpha: f64,
    gamma: f64,
) -> Result<OrbitSummary> {
    let mut x = x0.clone();
    let (mut se, mut sr) = (0.0, 0.0);
    let (mut le, mut lr) = (0, 0);
    let mut lin = Vec::with_capacity(1);
    let mut ltd = Vec::with_capacity(1);
    for j in 0..n {
        let t = omega.parameter_at(j as i64);
        lin.clear();
        ltd.clear();
        step_samples(family, &t, &x, delta, j, &mut lin, &mut ltd)?;
        let m = (j + 1) as f64;
        se += lin[0];
        if se / m > -alpha {
            le = j + 1;
        }
        if let Some(d) = ltd.first() {
            sr += d;
            if sr / m > gamma {
                lr = j + 1;
            }
        }
        x = family.eval(&t, &x).map_err(|e| with_step(e, j))?;
    }
    Ok(OrbitSummary { horizon: n, last_expansion_violation: le, last_recurrence_violation: lr, sum_log_inv_norm: se })
}

/// How the critical-recurrence threshold of quadratic maps is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaReading {
    /// Count only points whose shell index is at least `(1/2 - 2 eta) log(1/eps)`.
    #[default]
    ShellIndex,
    /// Use `sqrt(eps) exp(-(1/2 - 2 eta) log(1/eps))` as a distance.
    LengthScale,
}

/// Truncation radius for quadratic maps at noise level `epsilon`.
pub fn unimodal_delta(eta: f64, epsilon: f64, reading: DeltaReading) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) || !(eta > 0.0 && eta < 0.1) {
        return invalid(format!("need 0 < eps < 1 and 0 < eta < 1/10, got eps={epsilon}, eta={eta}"));
    }
    let depth = (0.5 - 2.0 * eta) * (1.0 / epsilon).ln();
    Ok(match reading {
        DeltaReading::ShellIndex => epsilon.sqrt() * (-(depth.max(1.0).ceil() - 1.0)).exp(),
        DeltaReading::LengthScale => epsilon.sqrt() * (-depth).exp(),
    })
}

/// Index `r` of the shell `I_r = (sqrt(eps) e^{-r}, sqrt(eps) e^{-(r-1)})`
/// containing `x`, or 0 outside every shell.
pub fn shell_index(x: f64, epsilon: f64) -> u32 {
    let ax = x.abs();
    if ax == 0.0 {
        return 0;
    }
    let u = (epsilon.sqrt() / ax).ln();
    if u <= 0.0 {
        return 0;
    }
    let r = u.ceil();
    if r == u {
        0
    } else {
        r as u32
    }
}

/// Parameters of the deep-return profile; `h1_alpha`, `h1_lambda` are the
/// constants of the critical-orbit growth hypothesis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DeepReturnParams {
    pub eta: f64,
    pub epsilon: f64,
    pub h1_alpha: f64,
    pub h1_lambda: f64,
}

impl DeepReturnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h1_lambda > 1.0 && self.h1_alpha > 0.0) {
            return invalid("need lambda > 1 and alpha > 0 for the growth hypothesis");
        }
        let lower = 2.0 * self.h1_alpha / self.h1_lambda.ln();
        if !(lower < self.eta && self.eta < 0.1) {
            return invalid(format!("eta={} must lie in ({lower}, 0.1)", self.eta));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        Ok(())
    }

    /// Shell-index threshold defining `G`.
    pub fn threshold(&self) -> f64 {
        1f64.max((0.5 - 2.0 * self.eta) * (1.0 / self.epsilon).ln())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeepReturnProfile {
    pub epsilon: f64,
    pub eta: f64,
    pub threshold: f64,
    /// `r_j` for `j < n`.
    pub r: Vec<u32>,
    /// Indices `j` with `r_j >= threshold`.
    pub g: Vec<usize>,
    pub sum_g: u64,
    /// `log |(f_omega^n)'(x)|`.
    pub log_derivative: f64,
}

impl DeepReturnProfile {
    /// `sum_{j in G} r_j <= c n`.
    pub fn within_budget(&self, c: f64) -> bool {
        self.sum_g as f64 <= c * self.r.len() as f64
    }

    /// `|(f_omega^n)'(x)| > e^{n / big_c}`.
    pub fn derivative_exceeds(&self, big_c: f64) -> bool {
        self.log_derivative > self.r.len() as f64 / big_c
    }
}

pub fn deep_return_profile(
    family: &MapFamily,
    record: &OrbitRecord,
    params: &DeepReturnParams,
) -> Result<DeepReturnProfile> {
    if !matches!(family.kind, FamilyKind::Unimodal { .. }) {
        return Err(Error::Unsupported("deep-return profiles exist for quadratic maps only".into()));
    }
    params.validate()?;
    let points = record
        .points
        .as_ref()
        .ok_or_else(|| Error::Unsupported("deep-return profile needs a record with stored points".into()))?;
    let threshold = params.threshold();
    let r: Vec<u32> = points[..record.len()].iter().map(|p| shell_index(p[0], params.epsilon)).collect();
    let g: Vec<usize> = r.iter().enumerate().filter(|(_, &v)| v as f64 >= threshold).map(|(j, _)| j).collect();
    let sum_g = g.iter().map(|&j| r[j] as u64).sum();
    let log_derivative = -record.log_inv_norm.iter().sum::<f64>();
    Ok(DeepReturnProfile { epsilon: params.epsilon, eta: params.eta, threshold, r, g, sum_g, log_derivative })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapcore::misiurewicz_parameter;
    use crate::noise::NoiseModel;

    fn still(eps: f64) -> Realization {
        Realization::new(11, NoiseModel::interval(eps).unwrap())
    }

    #[test]
    fn doubling_orbit() {
        let f = MapFamily::doubling();
        let rec = iterate_record(&f, &still(0.0), &PhasePoint::scalar(0.1), 3, 0.1).unwrap();
        let pts: Vec<f64> = rec.points.unwrap().iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![0.1, 0.2, 0.4, 0.8]);
        assert!(rec.log_inv_norm.iter().all(|&v| v == -(2f64.ln())));
        assert!(rec.log_trunc_dist.is_empty());
    }

    #[test]
    fn unimodal_critical_orbit() {
        let a = misiurewicz_parameter();
        let f = MapFamily::unimodal(a, 1e-3).unwrap();
        // x0 = 0 is critical, so start the record one step later at f(0) = a
        let rec = iterate_record(&f, &still(0.0), &PhasePoint::scalar(a), 4, 0.1).unwrap();
        let mut x = a;
        for p in rec.points.unwrap() {
            assert_eq!(p[0], x);
            x = a - x * x;
        }
        assert!(matches!(
            iterate_record(&f, &still(0.0), &PhasePoint::scalar(0.0), 2, 0.1),
            Err(Error::CriticalHit(_))
        ));
    }

    #[test]
    fn time_examples() {
        assert_eq!(expansion_time_of(&[-(2f64.ln()); 10], 0.5), TimeValue::At(1));
        let mut seq = vec![0.2];
        seq.extend(std::iter::repeat(-1.0).take(20));
        assert_eq!(expansion_time_of(&seq, 0.5), TimeValue::At(3));
        assert_eq!(expansion_time_of(&seq, 5.0), TimeValue::ExceedsHorizon);
        let mut rec = vec![5.0];
        rec.extend(std::iter::repeat(0.0).take(20));
        assert_eq!(recurrence_time_of(&rec, 1.0), TimeValue::At(5));
        assert_eq!(recurrence_time_of(&[0.0; 8], 0.1), TimeValue::At(1));
        assert_eq!(recurrence_time_of(&rec, 100.0), TimeValue::At(1));
    }

    #[test]
    fn shells() {
        let eps: f64 = 1e-4;
        for r in 1..6u32 {
            let x = eps.sqrt() * (-(r as f64) + 0.5).exp();
            assert_eq!(shell_index(x, eps), r);
            assert_eq!(shell_index(-x, eps), r);
        }
        assert_eq!(shell_index(0.5, eps), 0);
    }

    #[test]
    fn delta_readings() {
        let eta = 0.05;
        let eps: f64 = 1e-6;
        let s = unimodal_delta(eta, eps, DeltaReading::ShellIndex).unwrap();
        let l = unimodal_delta(eta, eps, DeltaReading::LengthScale).unwrap();
        // depth = 0.4 * ln(1e6) = 5.526 -> shells r >= 6
        assert!((s - eps.sqrt() * (-5f64).exp()).abs() < 1e-15);
        assert!((l - eps.powf(0.9)).abs() < 1e-15);
        assert!(unimodal_delta(0.2, eps, DeltaReading::ShellIndex).is_err());
    }
}
