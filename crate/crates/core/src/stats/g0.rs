//! Waiting-time surrogate `g0(omega)` from per-realization tail series.
//!
//! With threshold `theta_n = sqrt(C exp(-gamma n^upsilon))` and
//! `B_n = {omega : y_omega(m) > theta_m for some grid m >= n}`, the surrogate
//! is `g0(omega) = min{n : omega not in B_n}`.

use serde::{Deserialize, Serialize};

use super::series::DecaySeries;
use crate::error::{invalid, Result};
use crate::noise::{tag, CounterRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
    pub upsilon: f64,
}

impl EnvelopeParams {
    pub fn new(c: f64, gamma: f64, upsilon: f64) -> Result<Self> {
        if !(c > 0.0 && gamma > 0.0 && upsilon > 0.0 && upsilon <= 1.0) {
            return invalid(format!("need C > 0, gamma > 0, upsilon in (0, 1]; got ({c}, {gamma}, {upsilon})"));
        }
        Ok(Self { c, gamma, upsilon })
    }

    /// `C exp(-gamma n^upsilon)`.
    pub fn bound(&self, n: u64) -> f64 {
        self.c * (-self.gamma * (n as f64).powf(self.upsilon)).exp()
    }

    /// `sqrt(C) exp(-(gamma/2) n^upsilon)`.
    pub fn threshold(&self, n: u64) -> f64 {
        self.bound(n).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum G0Value {
    At(u64),
    /// The series still exceeds the threshold at the last grid point.
    Censored,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct G0Report {
    pub params: EnvelopeParams,
    pub g0: Vec<(i64, G0Value)>,
    /// `P(g0 > n)` over the grid; censored realizations count as exceeding.
    pub tail: DecaySeries,
    pub censored_fraction: f64,
}

impl G0Report {
    pub fn resolved_values(&self) -> Vec<u64> {
        self.g0
            .iter()
            .filter_map(|(_, v)| match v {
                G0Value::At(n) => Some(*n),
                G0Value::Censored => None,
            })
            .collect()
    }
}

/// Extracts `g0` for each series of `field` (all series share one grid).
pub fn extract_g0(field: &[DecaySeries], params: &EnvelopeParams) -> Result<G0Report> {
    let Some(first) = field.first() else {
        return invalid("g0 extraction needs at least one series");
    };
    let grid = first.ns();
    if grid.is_empty() {
        return invalid("g0 extraction needs a nonempty grid");
    }
    if field.iter().any(|s| s.ns() != grid) {
        return invalid("all series of the field must share one grid");
    }
    let theta: Vec<f64> = grid.iter().map(|&n| params.threshold(n)).collect();
    let g0: Vec<(i64, G0Value)> = field
        .iter()
        .map(|s| {
            let last = s.points.iter().zip(&theta).rposition(|(p, &t)| p.value > t);
            let v = match last {
                None => G0Value::At(grid[0]),
                Some(i) if i + 1 == grid.len() => G0Value::Censored,
                Some(i) => G0Value::At(grid[i + 1]),
            };
            (s.omega_id, v)
        })
        .collect();
    let total = g0.len() as f64;
    let censored = g0.iter().filter(|(_, v)| *v == G0Value::Censored).count();
    let mut tail = DecaySeries::new("g0_tail", -1);
    for &n in &grid {
        let count = g0
            .iter()
            .filter(|(_, v)| match v {
                G0Value::At(m) => *m > n,
                G0Value::Censored => true,
            })
            .count();
        let p = count as f64 / total;
        // unresolved once only censored realizations remain above n
        tail.push(n, p, (p * (1.0 - p) / total).sqrt(), count as u64, censored > 0 && count == censored);
    }
    let censored_fraction = censored as f64 / total;
    Ok(G0Report { params: *params, g0, tail, censored_fraction })
}

/// Field whose realization `i` exceeds the threshold exactly before an onset
/// drawn from the geometric law `P(G = k) = (1-p)^k p`, `k >= 0`.
/// Returns the field and the drawn onsets.
pub fn geometric_onset_field(
    p: f64,
    realizations: usize,
    grid: &[u64],
    params: &EnvelopeParams,
    seed: u64,
) -> Result<(Vec<DecaySeries>, Vec<u64>)> {
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("geometric parameter must lie in (0, 1), got {p}"));
    }
    let mut field = Vec::with_capacity(realizations);
    let mut onsets = Vec::with_capacity(realizations);
    for i in 0..realizations {
        let mut rng = CounterRng::for_task(seed, tag("geometric_onset"), i as u64);
        let u = 1.0 - rng.uniform();
        let g = (u.ln() / (1.0 - p).ln()).floor() as u64;
        let mut s = DecaySeries::new("field", i as i64);
        for &n in grid {
            let t = params.threshold(n).min(1.0);
            let v = if n < g { 0.5 * (1.0 + t) } else { 0.5 * t };
            s.push(n, v, 0.0, 1, false);
        }
        field.push(s);
        onsets.push(g);
    }
    Ok((field, onsets))
}

/// Field with product mean at most `C exp(-gamma n^upsilon)`: realization `i`
/// carries `min(1, 2 theta_n)` on `{U_i < theta_n / 2}` and 0 elsewhere, so
/// `P(g0 > n) = theta_n / 2`.
pub fn envelope_field(realizations: usize, grid: &[u64], params: &EnvelopeParams, seed: u64) -> Vec<DecaySeries> {
    (0..realizations)
        .map(|i| {
            let mut rng = CounterRng::for_task(seed, tag("envelope_field"), i as u64);
            let u = rng.uniform();
            let mut s = DecaySeries::new("field", i as i64);
            for &n in grid {
                let t = params.threshold(n);
                let v = if u < 0.5 * t { (2.0 * t).min(1.0) } else { 0.0 };
                s.push(n, v, 0.0, 1, false);
            }
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_threshold_everywhere_gives_first_index() {
        let params = EnvelopeParams::new(0.5, 0.2, 1.0).unwrap();
        let grid: Vec<u64> = (0..20).collect();
        let field: Vec<_> = (0..5)
            .map(|i| {
                let mut s = DecaySeries::from_fn("f", &grid, |n| 0.1 * params.threshold(n));
                s.omega_id = i;
                s
            })
            .collect();
        let r = extract_g0(&field, &params).unwrap();
        assert!(r.g0.iter().all(|(_, v)| *v == G0Value::At(0)));
        assert_eq!(r.tail.points[0].value, 0.0);
    }

    #[test]
    fn geometric_field_is_recovered_exactly() {
        let params = EnvelopeParams::new(0.5, 0.1, 1.0).unwrap();
        let grid: Vec<u64> = (0..200).collect();
        let (field, onsets) = geometric_onset_field(0.2, 300, &grid, &params, 4).unwrap();
        let r = extract_g0(&field, &params).unwrap();
        assert_eq!(r.resolved_values(), onsets);
    }

    #[test]
    fn last_point_exceedance_is_censored() {
        let params = EnvelopeParams::new(0.5, 0.1, 1.0).unwrap();
        let s = DecaySeries::from_fn("f", &[0, 1, 2], |_| 1.0);
        let r = extract_g0(&[s], &params).unwrap();
        assert_eq!(r.g0[0].1, G0Value::Censored);
        assert_eq!(r.censored_fraction, 1.0);
    }

    #[test]
    fn tail_points_resolve_while_uncensored_realizations_remain() {
        let params = EnvelopeParams::new(0.5, 0.1, 1.0).unwrap();
        let grid = [0, 1, 2, 3];
        let early = DecaySeries::from_fn("a", &grid, |n| if n == 0 { 1.0 } else { 0.0 });
        let late = DecaySeries::from_fn("b", &grid, |_| 1.0);
        let r = extract_g0(&[early, late], &params).unwrap();
        let flags: Vec<bool> = r.tail.points.iter().map(|p| p.censored).collect();
        assert_eq!(flags, [false, true, true, true]);
        assert_eq!(r.tail.values(), [1.0, 0.5, 0.5, 0.5]);
    }
}
