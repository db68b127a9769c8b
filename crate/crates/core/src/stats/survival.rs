//! Weighted Kaplan-Meier survival estimates for horizon-capped times.

use serde::{Deserialize, Serialize};

use super::series::DecaySeries;

/// An observed time, or a lower bound on it when `censored`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: u64,
    pub censored: bool,
    pub weight: f64,
}

impl Observation {
    pub fn event(time: u64) -> Self {
        Self { time, censored: false, weight: 1.0 }
    }

    pub fn censored_at(time: u64) -> Self {
        Self { time, censored: true, weight: 1.0 }
    }
}

/// `P(T > n)` on the grid `ns`, with Greenwood standard errors.
///
/// A censored observation at `c` is at risk for every event time `t <= c`.
/// Points past the last uncensored event where all mass is censored are
/// flagged `censored`.
pub fn kaplan_meier(obs: &[Observation], ns: &[u64], series_id: &str, omega_id: i64) -> DecaySeries {
    let mut sorted: Vec<Observation> = obs.iter().copied().filter(|o| o.weight > 0.0).collect();
    sorted.sort_by(|a, b| a.time.cmp(&b.time).then(a.censored.cmp(&b.censored)));
    let total: f64 = sorted.iter().map(|o| o.weight).sum();
    let total_sq: f64 = sorted.iter().map(|o| o.weight * o.weight).sum();
    // effective sample size for the Greenwood scale
    let n_eff = if total_sq > 0.0 { total * total / total_sq } else { 0.0 };
    let scale = if total > 0.0 { n_eff / total } else { 0.0 };

    let mut out = DecaySeries::new(series_id, omega_id);
    let mut at_risk = total;
    let mut surv = 1.0f64;
    let mut green = 0.0f64;
    let mut i = 0;
    let max_censor = sorted.iter().filter(|o| o.censored).map(|o| o.time).max();
    for &n in ns {
        while i < sorted.len() && sorted[i].time <= n {
            let t = sorted[i].time;
            let (mut d, mut c) = (0.0, 0.0);
            while i < sorted.len() && sorted[i].time == t {
                if sorted[i].censored {
                    c += sorted[i].weight;
                } else {
                    d += sorted[i].weight;
                }
                i += 1;
            }
            if d > 0.0 && at_risk > 0.0 {
                surv *= 1.0 - d / at_risk;
                let (re, de) = (at_risk * scale, d * scale);
                if re > de {
                    green += de / (re * (re - de));
                }
            }
            at_risk -= d + c;
        }
        let censored = max_censor.is_some_and(|c| n >= c) && at_risk <= 0.0;
        let stderr = surv * green.sqrt();
        out.push(n, surv.max(0.0), stderr, n_eff.round() as u64, censored);
    }
    out
}

/// Fraction of total weight censored at or before `n`.
pub fn censored_fraction(obs: &[Observation], n: u64) -> f64 {
    let total: f64 = obs.iter().map(|o| o.weight).sum();
    if total == 0.0 {
        return 0.0;
    }
    obs.iter().filter(|o| o.censored && o.time <= n).map(|o| o.weight).sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncensored_is_empirical_survival() {
        let obs: Vec<_> = [1, 2, 2, 3, 5].iter().map(|&t| Observation::event(t)).collect();
        let s = kaplan_meier(&obs, &[0, 1, 2, 3, 4, 5], "t", 0);
        let v = s.values();
        let want = [1.0, 0.8, 0.4, 0.2, 0.2, 0.0];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_censoring_keeps_mass() {
        let mut obs: Vec<_> = [1, 1, 2].iter().map(|&t| Observation::event(t)).collect();
        obs.push(Observation::censored_at(10));
        let s = kaplan_meier(&obs, &[1, 2, 9, 10], "t", 0);
        assert!((s.points[1].value - 0.25).abs() < 1e-12);
        assert!((s.points[2].value - 0.25).abs() < 1e-12);
        assert!(s.points[3].censored);
        assert!((censored_fraction(&obs, 10) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn classic_textbook_example() {
        // events at 3, 5(c), 6, 8(c), 10: S(6) = 4/5 * 2/3
        let obs = vec![
            Observation::event(3),
            Observation::censored_at(5),
            Observation::event(6),
            Observation::censored_at(8),
            Observation::event(10),
        ];
        let s = kaplan_meier(&obs, &[6], "t", 0);
        assert!((s.points[0].value - 0.8 * 2.0 / 3.0).abs() < 1e-12);
    }
}
