//! Stretched-exponential fits `y_n ~ C exp(-gamma n^upsilon)`.
//!
//! The fit is a profile least-squares problem in `log y`: for fixed `upsilon`
//! the model `log y = log C - gamma n^upsilon` is linear, so `log C` and
//! `gamma` come from a regression and only `upsilon` is searched.

use serde::{Deserialize, Serialize};

use super::series::DecaySeries;
use crate::error::{Error, Result};

pub const UPSILON_MIN: f64 = 0.01;

/// Which points of a series enter the fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPolicy {
    /// Points above this value are pre-asymptotic and skipped.
    pub max_value: f64,
    /// Absolute floor; the window stops at the first value below it.
    pub min_value: f64,
    /// The window also stops at the first value below `noise_sigmas * stderr`.
    pub noise_sigmas: f64,
    pub min_points: usize,
    pub n_min: Option<u64>,
    pub n_max: Option<u64>,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self { max_value: 0.5, min_value: 1e-6, noise_sigmas: 3.0, min_points: 5, n_min: None, n_max: None }
    }
}

impl WindowPolicy {
    pub fn starting_at(self, n: u64) -> Self {
        Self { n_min: Some(n), ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitingIndex {
    At(u64),
    BeyondHorizon,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub n_lo: u64,
    pub n_hi: u64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StretchedExpFit {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
    pub upsilon: f64,
    /// Approximate 95% interval for `upsilon` from the profile likelihood.
    pub upsilon_ci: [f64; 2],
    /// Coefficient of determination in `log y`.
    pub r2: f64,
    pub n0: WaitingIndex,
    pub window: FitWindow,
    pub monotone: bool,
}

impl StretchedExpFit {
    pub fn bound(&self, n: f64) -> f64 {
        self.c * (-self.gamma * n.powf(self.upsilon)).exp()
    }

    pub fn ci_half_width(&self) -> f64 {
        0.5 * (self.upsilon_ci[1] - self.upsilon_ci[0])
    }
}

/// Selects the fit window: the first point at or below `max_value`, then
/// every following point until the first one at the noise floor.
pub fn select_window(series: &DecaySeries, policy: &WindowPolicy) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut started = false;
    for p in &series.points {
        if policy.n_min.is_some_and(|m| p.n < m) || policy.n_max.is_some_and(|m| p.n > m) {
            continue;
        }
        let floor = policy.min_value.max(policy.noise_sigmas * p.stderr);
        if !(p.value > floor) || p.n == 0 {
            if started {
                break;
            }
            continue;
        }
        if p.value > policy.max_value {
            continue;
        }
        started = true;
        out.push((p.n as f64, p.value.ln()));
    }
    out
}

struct Profile<'a> {
    pts: &'a [(f64, f64)],
}

impl Profile<'_> {
    /// `(sse, intercept, slope)` of the regression of `log y` on `n^u`.
    fn regress(&self, u: f64) -> (f64, f64, f64) {
        let m = self.pts.len() as f64;
        let xs: Vec<f64> = self.pts.iter().map(|(n, _)| n.powf(u)).collect();
        let mx = xs.iter().sum::<f64>() / m;
        let my = self.pts.iter().map(|p| p.1).sum::<f64>() / m;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (x, (_, y)) in xs.iter().zip(self.pts) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let icpt = my - slope * mx;
        let sse = xs.iter().zip(self.pts).map(|(x, (_, y))| (y - icpt - slope * x).powi(2)).sum();
        (sse, icpt, slope)
    }

    fn sse(&self, u: f64) -> f64 {
        self.regress(u).0
    }

    /// Minimizer of the profile SSE on `[UPSILON_MIN, 1]`.
    fn argmin(&self) -> f64 {
        let k = 200;
        let grid: Vec<f64> = (0..=k).map(|i| UPSILON_MIN + (1.0 - UPSILON_MIN) * i as f64 / k as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&u| self.sse(u)).collect();
        let best = (0..=k).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let mut a = grid[best.saturating_sub(1)];
        let mut b = grid[(best + 1).min(k)];
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (self.sse(c), self.sse(d));
        for _ in 0..200 {
            if (b - a).abs() < 1e-13 {
                break;
            }
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = self.sse(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = self.sse(d);
            }
        }
        let u = 0.5 * (a + b);
        // the grid end points are admissible minimizers too
        [u, UPSILON_MIN, 1.0].into_iter().min_by(|&x, &y| self.sse(x).total_cmp(&self.sse(y))).unwrap()
    }

    /// Points where `m log(SSE(u)/SSE_min)` crosses the chi-square(1) 95% level.
    fn ci(&self, u_hat: f64, sse_min: f64) -> [f64; 2] {
        let m = self.pts.len() as f64;
        if sse_min <= 1e-28 * m {
            return [u_hat, u_hat];
        }
        let excess = |u: f64| m * (self.sse(u) / sse_min).ln() - 3.841;
        let edge = |lim: f64| {
            if excess(lim) <= 0.0 {
                return lim;
            }
            let (mut inside, mut outside) = (u_hat, lim);
            for _ in 0..60 {
                let mid = 0.5 * (inside + outside);
                if excess(mid) <= 0.0 {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            0.5 * (inside + outside)
        };
        [edge(UPSILON_MIN), edge(1.0)]
    }
}

/// Fits `C exp(-gamma n^upsilon)` with `upsilon` in `[0.01, 1]`.
pub fn fit_stretched_exp(series: &DecaySeries, policy: &WindowPolicy) -> Result<StretchedExpFit> {
    let pts = select_window(series, policy);
    if pts.len() < policy.min_points.max(3) {
        return Err(Error::Fit(format!(
            "series '{}' has {} usable points in ({}, {}], need {}",
            series.series_id,
            pts.len(),
            policy.min_value,
            policy.max_value,
            policy.min_points
        )));
    }
    let prof = Profile { pts: &pts };
    let u = prof.argmin();
    let (sse, icpt, slope) = prof.regress(u);
    let gamma = -slope;
    if !(gamma > 0.0) {
        return Err(Error::Fit(format!("series '{}' does not decay over the fit window", series.series_id)));
    }
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sst: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    let mut fit = StretchedExpFit {
        c: icpt.exp(),
        gamma,
        upsilon: u,
        upsilon_ci: prof.ci(u, sse),
        r2,
        n0: WaitingIndex::BeyondHorizon,
        window: FitWindow { n_lo: pts[0].0 as u64, n_hi: pts[pts.len() - 1].0 as u64, points: pts.len() },
        monotone: series.is_nonincreasing(),
    };
    fit.n0 = waiting_index(series, &fit);
    Ok(fit)
}

/// First grid point from which the fitted bound dominates every later value
/// (to within two standard errors, and a relative 1e-9 for noiseless data).
pub fn waiting_index(series: &DecaySeries, fit: &StretchedExpFit) -> WaitingIndex {
    let mut n0 = None;
    for p in series.points.iter().rev() {
        let b = fit.bound(p.n as f64);
        if p.value <= b * (1.0 + 1e-9) + 2.0 * p.stderr {
            n0 = Some(p.n);
        } else {
            break;
        }
    }
    match n0 {
        Some(n) => WaitingIndex::At(n),
        None => WaitingIndex::BeyondHorizon,
    }
}

/// Two-parameter fit with `C = 1`: regression of `log(-log y)` on `log n`.
pub fn fit_loglog(series: &DecaySeries, policy: &WindowPolicy) -> Result<(f64, f64)> {
    let pts = select_window(series, policy);
    if pts.len() < policy.min_points.max(3) {
        return Err(Error::Fit(format!("series '{}' has too few usable points", series.series_id)));
    }
    let xy: Vec<(f64, f64)> = pts.iter().map(|(n, ly)| (n.ln(), (-ly).ln())).collect();
    let m = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / m;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let upsilon = sxy / sxx;
    Ok(((my - upsilon * mx).exp(), upsilon))
}
