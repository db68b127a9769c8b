//! `(lambda, delta)`-hyperbolic times and hyperbolic pre-balls.
//!
//! `n` is a hyperbolic time for `(omega, x)` when, for every `1 <= k <= n`,
//! the window `j = n-k, ..., n-1` satisfies
//! `sum_j log ||Df(x_j)^{-1}|| <= k log lambda` and
//! `dist_delta(x_{n-k}, C) >= lambda^{b k}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::mapcore::{wrap_centered, Jacobian, MapFamily, PhasePoint};
use crate::noise::Realization;
use crate::orbit::{expansion_time_of, iterate_record, recurrence_time_of, OrbitRecord, TimeValue};

/// Contraction rate and recurrence exponent. The rate is stored as
/// `log lambda` so that windows with exactly representable sums compare exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicParams {
    pub log_lambda: f64,
    pub b: f64,
}

impl HyperbolicParams {
    pub fn new(lambda: f64, b: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return invalid(format!("lambda must lie in (0, 1), got {lambda}"));
        }
        Self::from_log_rate(lambda.ln(), b)
    }

    pub fn from_log_rate(log_lambda: f64, b: f64) -> Result<Self> {
        if !(log_lambda < 0.0 && log_lambda.is_finite()) {
            return invalid(format!("log lambda must be negative, got {log_lambda}"));
        }
        if !(b > 0.0) {
            return invalid(format!("b must be positive, got {b}"));
        }
        Ok(Self { log_lambda, b })
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    /// `-log dist_delta <= b k (-log lambda)`.
    #[inline]
    pub fn distance_ok(&self, log_trunc_dist: f64, k: usize) -> bool {
        log_trunc_dist <= self.b * k as f64 * -self.log_lambda
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperbolicTimeSet {
    pub lambda: f64,
    pub delta: f64,
    pub b: f64,
    pub horizon: usize,
    pub times: Vec<usize>,
}

/// All hyperbolic times `n <= horizon` of the sequences, by a linear scan.
///
/// The contraction clause holds at `n` iff the prefix sum
/// `P_n = sum_{i<n} (L_i - log lambda)` is at most every earlier `P_i`.
/// The distance clause holds iff `n >= i + k_i` for every `i < n`, where
/// `k_i` is the least window length tolerating the depth at time `i`.
/// An empty `log_trunc_dist` drops the distance clause.
pub fn hyperbolic_times_of(log_inv_norm: &[f64], log_trunc_dist: &[f64], params: &HyperbolicParams) -> Vec<usize> {
    let n = log_inv_norm.len();
    let with_dist = !log_trunc_dist.is_empty();
    assert!(!with_dist || log_trunc_dist.len() == n, "sequence lengths differ");
    let mut times = Vec::new();
    let mut prefix = 0.0f64;
    let mut min_prefix = 0.0f64;
    let mut reach = 0usize;
    for i in 0..n {
        if with_dist {
            reach = reach.max(i + min_window(log_trunc_dist[i], params));
        }
        prefix += log_inv_norm[i] - params.log_lambda;
        let m = i + 1;
        if prefix <= min_prefix && m >= reach {
            times.push(m);
        }
        min_prefix = min_prefix.min(prefix);
    }
    times
}

/// Least `k >= 1` with `distance_ok(d, k)`; saturates for infinite depth.
fn min_window(d: f64, params: &HyperbolicParams) -> usize {
    if params.distance_ok(d, 1) {
        return 1;
    }
    let guess = d / (params.b * -params.log_lambda);
    if !guess.is_finite() || guess > 1e15 {
        return usize::MAX / 2;
    }
    let mut k = (guess.ceil() as usize).max(1);
    while k > 1 && params.distance_ok(d, k - 1) {
        k -= 1;
    }
    while !params.distance_ok(d, k) {
        k += 1;
    }
    k
}

pub fn hyperbolic_times(record: &OrbitRecord, params: &HyperbolicParams) -> HyperbolicTimeSet {
    HyperbolicTimeSet {
        lambda: params.lambda(),
        delta: record.delta,
        b: params.b,
        horizon: record.len(),
        times: hyperbolic_times_of(&record.log_inv_norm, &record.log_trunc_dist, params),
    }
}

/// Whether `n` alone is a hyperbolic time; O(n).
pub fn is_hyperbolic_time(log_inv_norm: &[f64], log_trunc_dist: &[f64], n: usize, params: &HyperbolicParams) -> bool {
    if n == 0 || n > log_inv_norm.len() {
        return false;
    }
    // P_n against min(P_0, ..., P_{n-1})
    let mut prefix = 0.0;
    let mut min_prefix = 0.0f64;
    for i in 0..n {
        if i > 0 {
            min_prefix = min_prefix.min(prefix);
        }
        prefix += log_inv_norm[i] - params.log_lambda;
    }
    if prefix > min_prefix {
        return false;
    }
    log_trunc_dist.is_empty() || (0..n).all(|i| params.distance_ok(log_trunc_dist[i], n - i))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrequencyStats {
    pub horizon: usize,
    pub eligible: usize,
    pub excluded: usize,
    pub min: f64,
    pub mean: f64,
    pub zeta: f64,
    pub fraction_below_zeta: f64,
    pub fraction_positive: f64,
    pub frequencies: Vec<f64>,
}

/// Frequency of hyperbolic times up to the record horizon, over orbits whose
/// expansion and recurrence times are certified within the horizon.
pub fn hyperbolic_frequency(
    records: &[OrbitRecord],
    params: &HyperbolicParams,
    alpha: f64,
    gamma: f64,
    zeta: f64,
) -> Result<FrequencyStats> {
    let horizon = records.first().map(|r| r.len()).unwrap_or(0);
    let freqs: Vec<Option<f64>> = records
        .par_iter()
        .map(|r| {
            let e = expansion_time_of(&r.log_inv_norm, alpha);
            let rec = if r.log_trunc_dist.is_empty() {
                TimeValue::At(1)
            } else {
                recurrence_time_of(&r.log_trunc_dist, gamma)
            };
            if e == TimeValue::ExceedsHorizon || rec == TimeValue::ExceedsHorizon {
                return None;
            }
            let count = hyperbolic_times_of(&r.log_inv_norm, &r.log_trunc_dist, params).len();
            Some(count as f64 / r.len() as f64)
        })
        .collect();
    let frequencies: Vec<f64> = freqs.iter().flatten().copied().collect();
    if frequencies.is_empty() {
        return Err(Error::Construction("no orbit has expansion and recurrence times within the horizon".into()));
    }
    let eligible = frequencies.len();
    let min = frequencies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = frequencies.iter().sum::<f64>() / eligible as f64;
    let below = frequencies.iter().filter(|&&f| f < zeta).count();
    let positive = frequencies.iter().filter(|&&f| f > 0.0).count();
    Ok(FrequencyStats {
        horizon,
        eligible,
        excluded: records.len() - eligible,
        min,
        mean,
        zeta,
        fraction_below_zeta: below as f64 / eligible as f64,
        fraction_positive: positive as f64 / eligible as f64,
        frequencies,
    })
}

/// Pre-ball region in the coordinates of the starting point (circle axes lifted).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Interval { lo: f64, hi: f64 },
    Polygon { vertices: Vec<PhasePoint>, bbox: Vec<(f64, f64)> },
}

/// Neighbourhood of `x` mapped by `f_omega^n` onto `B(f_omega^n x, delta1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreBall {
    pub center: PhasePoint,
    pub time: usize,
    pub delta1: f64,
    pub delta1_prime: f64,
    pub region: Region,
    /// Empirical distortion constant over sampled pairs.
    pub distortion: f64,
    /// Worst ratio of the observed backward contraction to `lambda^{k/2}`.
    pub contraction_ratio: f64,
    /// Whether the image of the region covers `B(f^n x, 0.99 delta1)`.
    pub covers_image: bool,
    /// Radius attempts halved before success.
    pub shrinks: u32,
}

/// Pullback of the offset interval `[lo, hi]` around `orbit[n]` to time 0,
/// keeping the intermediate intervals (offsets from `orbit[j]`).
pub fn pullback_offsets(family: &MapFamily, orbit: &[f64], lo: f64, hi: f64) -> Result<Option<Vec<(f64, f64)>>> {
    let n = orbit.len() - 1;
    let mut out = vec![(0.0, 0.0); n + 1];
    out[n] = (lo, hi);
    let (mut a, mut b) = (lo, hi);
    for j in (0..n).rev() {
        let ya = family.inverse_offset_1d(orbit[j], a)?;
        let yb = family.inverse_offset_1d(orbit[j], b)?;
        match (ya, yb) {
            (Some(u), Some(v)) => {
                a = u.min(v);
                b = u.max(v);
            }
            _ => return Ok(None),
        }
        out[j] = (a, b);
    }
    Ok(Some(out))
}

/// Pushes an offset `dy` around `orbit[j0]` forward to time `j1`.
pub fn push_offset(family: &MapFamily, orbit: &[f64], j0: usize, j1: usize, dy: f64) -> Result<f64> {
    let mut d = dy;
    for j in j0..j1 {
        d = family.forward_offset_1d(orbit[j], d)?;
    }
    Ok(d)
}

/// Builds the hyperbolic pre-ball of `x` at time `n`, halving `delta1` up to
/// three times if a branch cannot be inverted.
pub fn build_preball(
    family: &MapFamily,
    omega: &Realization,
    x: &PhasePoint,
    n: usize,
    delta1: f64,
    params: &HyperbolicParams,
) -> Result<PreBall> {
    if n == 0 {
        return invalid("pre-balls need n >= 1");
    }
    if !(delta1 > 0.0) {
        return invalid("delta1 must be positive");
    }
    let record = iterate_record(family, omega, x, n, 1.0)?;
    let orbit = record.points.as_ref().ok_or_else(|| Error::Unsupported("pre-ball orbit too long".into()))?;
    let mut radius = delta1;
    for shrinks in 0..4u32 {
        let built = if family.is_one_dimensional() {
            preball_1d(family, orbit, radius, params)?
        } else {
            preball_nd(family, omega, orbit, radius, params)?
        };
        if let Some((region, distortion, contraction_ratio, covers_image)) = built {
            return Ok(PreBall {
                center: x.clone(),
                time: n,
                delta1: radius,
                delta1_prime: radius / 12.0,
                region,
                distortion,
                contraction_ratio,
                covers_image,
                shrinks,
            });
        }
        radius *= 0.5;
    }
    Err(Error::Construction(format!(
        "no monotone branch of f^{n} around {x} covers a ball of radius {}: detector and geometry disagree",
        delta1 / 8.0
    )))
}

type Built = Option<(Region, f64, f64, bool)>;

fn preball_1d(family: &MapFamily, orbit: &[PhasePoint], radius: f64, params: &HyperbolicParams) -> Result<Built> {
    let xs: Vec<f64> = orbit.iter().map(|p| p[0]).collect();
    let n = xs.len() - 1;
    let Some(ends) = pullback_offsets(family, &xs, -radius, radius)? else {
        return Ok(None);
    };
    // sample pairs inside the ball and follow them back
    const K: usize = 17;
    let mut paths = Vec::with_capacity(K);
    for i in 0..K {
        let s = -1.0 + 2.0 * (i as f64 + 0.5) / K as f64;
        let Some(p) = pullback_offsets(family, &xs, s * radius, s * radius)? else {
            return Ok(None);
        };
        paths.push(p);
    }
    let logd = |p: &Vec<(f64, f64)>| -> Result<f64> {
        let mut s = 0.0;
        for j in 0..n {
            s += family.derivative_1d(xs[j] + p[j].0)?.abs().ln();
        }
        Ok(s)
    };
    let logs: Vec<f64> = paths.iter().map(logd).collect::<Result<_>>()?;
    let mut distortion = 0.0f64;
    let mut contraction = 0.0f64;
    let half = (0.5 * params.log_lambda).exp();
    for a in 0..K {
        for b in a + 1..K {
            let dn = (paths[a][n].0 - paths[b][n].0).abs();
            distortion = distortion.max((logs[a] - logs[b]).abs() / dn);
            let mut bound = dn;
            for k in 1..=n {
                bound *= half;
                let dk = (paths[a][n - k].0 - paths[b][n - k].0).abs();
                contraction = contraction.max(dk / bound);
            }
        }
    }
    let lo_img = push_offset(family, &xs, 0, n, ends[0].0)?;
    let hi_img = push_offset(family, &xs, 0, n, ends[0].1)?;
    let (ilo, ihi) = (lo_img.min(hi_img), lo_img.max(hi_img));
    let covers = ilo <= -0.99 * radius && ihi >= 0.99 * radius;
    let region = Region::Interval { lo: xs[0] + ends[0].0, hi: xs[0] + ends[0].1 };
    Ok(Some((region, distortion, contraction, covers)))
}

fn lifted_diff(family: &MapFamily, a: &[f64], b: &[f64]) -> SmallVec<[f64; 4]> {
    a.iter()
        .zip(b)
        .zip(&family.space.periodic)
        .map(|((x, y), &p)| if p { wrap_centered(x - y) } else { x - y })
        .collect()
}

fn preball_nd(
    family: &MapFamily,
    omega: &Realization,
    orbit: &[PhasePoint],
    radius: f64,
    params: &HyperbolicParams,
) -> Result<Built> {
    const M: usize = 64;
    let n = orbit.len() - 1;
    let dim = family.dim();
    let ts: Vec<_> = (0..n).map(|j| omega.parameter_at(j as i64)).collect();
    // boundary points at time n, pulled back one step at a time
    let mut paths: Vec<Vec<PhasePoint>> = Vec::with_capacity(M);
    for i in 0..M {
        let th = 2.0 * std::f64::consts::PI * i as f64 / M as f64;
        let mut z = orbit[n].clone();
        z[0] += radius * th.cos();
        z[1] += radius * th.sin();
        for (c, &p) in z.iter_mut().zip(&family.space.periodic) {
            if p {
                *c = crate::mapcore::wrap01(*c);
            }
        }
        if !family.space.contains(&z) {
            return Ok(None);
        }
        let mut path = vec![PhasePoint::default(); n + 1];
        path[n] = z;
        for j in (0..n).rev() {
            let inv = match family.jacobian(&orbit[j]).ok().and_then(|m| m.inverse()) {
                Some(m) => m,
                None => return Ok(None),
            };
            let d = lifted_diff(family, &path[j + 1], &orbit[j + 1]);
            let step = inv.apply(&d);
            let guess: SmallVec<[f64; 4]> = orbit[j].iter().zip(&step).map(|(a, s)| a + s).collect();
            match family.local_inverse(&ts[j], &path[j + 1], &guess) {
                Ok(y) => {
                    if family.space.distance(&y, &orbit[j]) > 4.0 * family.space.distance(&path[j + 1], &orbit[j + 1]) + 1e-12 {
                        return Ok(None);
                    }
                    path[j] = y;
                }
                Err(_) => return Ok(None),
            }
        }
        paths.push(path);
    }
    // backward contraction at the boundary points
    let half = (0.5 * params.log_lambda).exp();
    let mut contraction = 0.0f64;
    let mut logdet = Vec::with_capacity(M);
    for path in &paths {
        let mut prod = Jacobian::diagonal(&vec![1.0; dim]);
        let mut bound = 1.0;
        let mut ld = 0.0;
        for k in 1..=n {
            let jac = family.jacobian(&path[n - k])?;
            ld += jac.det().abs().ln();
            prod = prod.mul(&jac);
            bound *= half;
            contraction = contraction.max(prod.inverse_norm() / bound);
        }
        logdet.push(ld);
    }
    let mut distortion = 0.0f64;
    for a in 0..M {
        for b in a + 1..M {
            let d = family.space.distance(&paths[a][n], &paths[b][n]);
            distortion = distortion.max((logdet[a] - logdet[b]).abs() / d);
        }
    }
    // vertices lifted next to the center; the polygon must be simple
    let vertices: Vec<PhasePoint> = paths
        .iter()
        .map(|p| {
            let d = lifted_diff(family, &p[0], &orbit[0]);
            PhasePoint(orbit[0].iter().zip(&d).map(|(a, b)| a + b).collect())
        })
        .collect();
    if !polygon_is_simple(&vertices) {
        return Ok(None);
    }
    let bbox: Vec<(f64, f64)> = (0..dim)
        .map(|k| {
            vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[k]), hi.max(v[k])))
        })
        .collect();
    Ok(Some((Region::Polygon { vertices, bbox }, distortion, contraction, true)))
}

fn polygon_is_simple(v: &[PhasePoint]) -> bool {
    let m = v.len();
    let cross = |o: &PhasePoint, a: &PhasePoint, b: &PhasePoint| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    for i in 0..m {
        let (a, b) = (&v[i], &v[(i + 1) % m]);
        for j in i + 2..m {
            if i == 0 && j == m - 1 {
                continue;
            }
            let (c, d) = (&v[j], &v[(j + 1) % m]);
            let d1 = cross(a, b, c);
            let d2 = cross(a, b, d);
            let d3 = cross(c, d, a);
            let d4 = cross(c, d, b);
            if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                return false;
            }
        }
    }
    true
}

/// Largest radius in `ladder` whose pre-balls build cleanly (no shrinking,
/// covering image, contraction within 5%) at `target` of the given
/// `(omega, x, n)` hyperbolic times.
pub fn calibrate_delta1(
    family: &MapFamily,
    samples: &[(Realization, PhasePoint, usize)],
    params: &HyperbolicParams,
    ladder: &[f64],
    target: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return invalid("calibration needs at least one hyperbolic time");
    }
    let mut sorted = ladder.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for &r in &sorted {
        let ok = samples
            .par_iter()
            .filter(|(w, x, n)| {
                matches!(build_preball(family, w, x, *n, r, params),
                    Ok(pb) if pb.shrinks == 0 && pb.covers_image && pb.contraction_ratio <= 1.05)
            })
            .count();
        if ok as f64 >= target * samples.len() as f64 {
            return Ok(r);
        }
    }
    Err(Error::Construction("no radius on the ladder builds pre-balls reliably".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseModel;

    #[test]
    fn small_example() {
        let p = HyperbolicParams::from_log_rate(-0.5, 0.25).unwrap();
        assert_eq!(hyperbolic_times_of(&[-1.0, 0.0, -1.0], &[], &p), vec![1, 3]);
        for n in 1..=3 {
            assert_eq!(is_hyperbolic_time(&[-1.0, 0.0, -1.0], &[], n, &p), n != 2);
        }
    }

    #[test]
    fn doubling_every_time_hyperbolic() {
        let p = HyperbolicParams::new(0.6, 0.25).unwrap();
        let seq = vec![-(2f64.ln()); 50];
        assert_eq!(hyperbolic_times_of(&seq, &[], &p), (1..=50).collect::<Vec<_>>());
    }

    #[test]
    fn distance_clause_blocks_deep_visits() {
        let p = HyperbolicParams::from_log_rate(-1.0, 0.5).unwrap();
        // depth 2 at time 1 needs a window of length 4: n >= 5
        let l = vec![-2.0; 8];
        let mut d = vec![0.0; 8];
        d[1] = 2.0;
        assert_eq!(hyperbolic_times_of(&l, &d, &p), vec![1, 5, 6, 7, 8]);
    }

    #[test]
    fn doubling_preball_is_dyadic() {
        let f = MapFamily::doubling();
        let w = Realization::new(1, NoiseModel::interval(0.0).unwrap());
        let p = HyperbolicParams::new(0.6, 0.25).unwrap();
        let pb = build_preball(&f, &w, &PhasePoint::scalar(0.3), 3, 0.1, &p).unwrap();
        let Region::Interval { lo, hi } = pb.region else { panic!() };
        assert!((hi - lo - 0.2 / 8.0).abs() < 1e-15);
        assert!((0.5 * (lo + hi) - 0.3).abs() < 1e-15);
        assert!(pb.covers_image);
        assert!(pb.distortion.abs() < 1e-9);
        assert!((pb.delta1_prime - 0.1 / 12.0).abs() < 1e-18);
    }
}
