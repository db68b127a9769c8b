//! Joint returns of pairs of tower points.
//!
//! Stopping times alternate between the two points: `tau^1` is the first
//! return of `x` to level 0 at time `>= l0`, `tau^2` the first return of `x'`
//! at time `>= tau^1 + l0`, and so on. The joint return time `T` is the first
//! `tau^i`, `i >= 2`, at which both points sit on level 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::noise::{sub_seed, tag, CounterRng};
use crate::stats::fit::waiting_index;
use crate::stats::{fit_stretched_exp, kaplan_meier, DecaySeries, Observation, StretchedExpFit, WaitingIndex, WindowPolicy};
use crate::tower::{equivariant_density, renewal, sample_density, weights_cdf, Tower, TowerPoint, TowerSpec};

/// `V^l = m(Delta_{j,0} ∩ F^{-l} Delta_{j+l,0})` for `l = 0..=max_ell`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapSeries {
    pub fiber: i64,
    pub values: Vec<f64>,
    /// Smallest `l0 >= 1` with `V^l > 0` for every `l0 <= l <= max_ell`;
    /// `None` unless the positive run covers at least the upper half of the range.
    pub ell0: Option<u32>,
}

fn ell0_of(values: &[f64]) -> Option<u32> {
    let last_zero = values.iter().rposition(|&v| !(v > 0.0));
    let max_ell = values.len().saturating_sub(1);
    let ell0 = last_zero.map_or(1, |i| i + 1).max(1);
    (ell0 <= max_ell.div_ceil(2).max(1)).then_some(ell0 as u32)
}

/// Exact overlap series of an affine tower from the renewal recursion.
pub fn overlap_v(tower: &Tower, j: i64, max_ell: u32) -> Result<OverlapSeries> {
    let values = renewal(tower, j, j + max_ell as i64, j..=j)?;
    Ok(OverlapSeries { fiber: j, ell0: ell0_of(&values), values })
}

/// Monte Carlo overlap: fraction of uniform base points of fiber `j` on level 0 after `l` steps.
pub fn overlap_v_monte_carlo(tower: &Tower, j: i64, max_ell: u32, samples: usize) -> Result<Vec<(f64, f64)>> {
    let seed = tower.spec().seed;
    let hits: Vec<Result<Vec<bool>>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = CounterRng::for_task(seed, tag("overlap"), i);
            let mut p = TowerPoint::base(rng.uniform(), j);
            let mut row = Vec::with_capacity(max_ell as usize + 1);
            row.push(true);
            for _ in 0..max_ell {
                p = tower.map(&p)?;
                row.push(p.level == 0);
            }
            Ok(row)
        })
        .collect();
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    let m = samples as f64;
    Ok((0..=max_ell as usize)
        .map(|l| {
            let v = hits.iter().filter(|r| r[l]).count() as f64 / m;
            (v, (v * (1.0 - v) / m).sqrt())
        })
        .collect())
}

/// Smallest `l0` that works for every series; `None` means aperiodicity fails at this horizon.
pub fn common_ell0(series: &[OverlapSeries]) -> Option<u32> {
    series.iter().map(|s| s.ell0).try_fold(1u32, |acc, e| e.map(|e| acc.max(e)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTrace {
    pub x: TowerPoint,
    pub y: TowerPoint,
    pub ell0: u32,
    pub taus: Vec<u64>,
    /// `None` when no joint return happens by the horizon.
    #[serde(rename = "T")]
    pub t: Option<u64>,
    pub horizon: u64,
}

fn levels(tower: &Tower, p: &TowerPoint, horizon: u64) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(horizon as usize + 1);
    let mut q = *p;
    out.push(q.level);
    for _ in 0..horizon {
        q = tower.map(&q)?;
        out.push(q.level);
    }
    Ok(out)
}

fn trace_from_levels(lx: &[u32], ly: &[u32], ell0: u64) -> (Vec<u64>, Option<u64>) {
    let horizon = lx.len() as u64 - 1;
    let mut taus = Vec::new();
    let mut prev = 0u64;
    for i in 1.. {
        let track = if i % 2 == 1 { lx } else { ly };
        let from = prev + ell0;
        let Some(tau) = (from..=horizon).find(|&t| track[t as usize] == 0) else {
            return (taus, None);
        };
        taus.push(tau);
        if i >= 2 && lx[tau as usize] == 0 && ly[tau as usize] == 0 {
            return (taus, Some(tau));
        }
        prev = tau;
    }
    unreachable!()
}

/// Stopping times and joint return of `(x, x')`, capped at `horizon`.
pub fn coupling_trace(tower: &Tower, x: &TowerPoint, y: &TowerPoint, ell0: u32, horizon: u64) -> Result<CouplingTrace> {
    if ell0 == 0 {
        return invalid("l0 must be at least 1");
    }
    if x.fiber != y.fiber {
        return invalid("coupled points must share a fiber");
    }
    let lx = levels(tower, x, horizon)?;
    let ly = levels(tower, y, horizon)?;
    let (taus, t) = trace_from_levels(&lx, &ly, ell0 as u64);
    Ok(CouplingTrace { x: *x, y: *y, ell0, taus, t, horizon })
}

/// Rechecks a trace against the definitions, step by step.
pub fn check_trace(tower: &Tower, trace: &CouplingTrace) -> Result<()> {
    let fail = |msg: String| Err(Error::Construction(format!("invalid coupling trace: {msg}")));
    let (mut p, mut q) = (trace.x, trace.y);
    let mut at_zero = vec![(p.level == 0, q.level == 0)];
    for _ in 0..trace.horizon {
        p = tower.map(&p)?;
        q = tower.map(&q)?;
        at_zero.push((p.level == 0, q.level == 0));
    }
    let l0 = trace.ell0 as u64;
    let mut prev = 0;
    for (k, &tau) in trace.taus.iter().enumerate() {
        let odd = k % 2 == 0;
        if tau < prev + l0 {
            return fail(format!("gap before tau^{} is below l0", k + 1));
        }
        let hit = |t: u64| if odd { at_zero[t as usize].0 } else { at_zero[t as usize].1 };
        if !hit(tau) || (prev + l0..tau).any(hit) {
            return fail(format!("tau^{} is not the first return of its point", k + 1));
        }
        let both = at_zero[tau as usize].0 && at_zero[tau as usize].1;
        let last = k + 1 == trace.taus.len();
        if k >= 1 && both != (last && trace.t == Some(tau)) {
            return fail(format!("joint return misplaced at tau^{}", k + 1));
        }
        prev = tau;
    }
    if trace.t.is_none() {
        let from = prev + l0;
        let parity_odd = trace.taus.len() % 2 == 0;
        if (from..=trace.horizon).any(|t| if parity_odd { at_zero[t as usize].0 } else { at_zero[t as usize].1 }) {
            return fail("trace stops before the horizon".into());
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLaw {
    /// Lebesgue on the base.
    Base,
    /// The equivariant density `nu`.
    Equivariant,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointTailParams {
    pub ns: Vec<u64>,
    pub samples: usize,
    pub horizon: u64,
    pub ell0: u32,
    pub n_back: usize,
    pub laws: (PairLaw, PairLaw),
    pub window: WindowPolicy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointTail {
    /// Kaplan-Meier `Lambda_omega(T > n)` per realization.
    pub per_omega: Vec<DecaySeries>,
    /// Kaplan-Meier over the pooled pairs.
    pub pooled: DecaySeries,
    /// Fraction of pairs without a joint return by the horizon, per realization.
    pub per_omega_censored: Vec<f64>,
    pub censored_fraction: f64,
    pub fit: Option<StretchedExpFit>,
    /// Fit restricted to `n >= n0` of the first fit.
    pub refit: Option<StretchedExpFit>,
    pub waiting: Vec<(i64, WaitingIndex)>,
    /// Fewer than 30 joint returns inside the fit window, or no fit.
    pub widened_ci: bool,
    /// `P(tau^{i+1} - tau^i > l0 + n) / m(R > n)` over the grid where both are resolved.
    pub gap_ratio: Option<(f64, f64)>,
    /// Hazards `P(T = tau^i | T >= tau^i)`, `i >= 2`.
    pub hazards: Vec<f64>,
    pub traces_checked: usize,
}

fn draw(tower: &Tower, law: PairLaw, rho: Option<&(crate::tower::FiberDensity, Vec<f64>)>, stream: u64, i: u64) -> Result<TowerPoint> {
    match law {
        PairLaw::Base => {
            let mut rng = CounterRng::for_task(sub_seed(tower.spec().seed, stream, 0), tag("pair_base"), i);
            Ok(TowerPoint::base(rng.uniform(), 0))
        }
        PairLaw::Equivariant => {
            let (d, cdf) = rho.expect("density prepared");
            sample_density(tower, d, cdf, stream, i)
        }
    }
}

/// Tail of the joint return time over `samples` pairs per realization.
pub fn joint_tail(specs: &[TowerSpec], params: &JointTailParams) -> Result<JointTail> {
    if specs.is_empty() || params.samples == 0 {
        return invalid("joint tail needs realizations and samples");
    }
    if params.ns.iter().any(|&n| n > params.horizon) {
        return invalid("grid extends beyond the horizon");
    }
    let max_r = specs.iter().map(|s| s.max_return).max().unwrap_or(1) as i64;
    let per: Vec<Result<(Vec<Observation>, Vec<u64>, Vec<(usize, bool)>, usize)>> = specs
        .iter()
        .map(|spec| {
            let tower = Tower::new(spec.clone(), -(params.n_back as i64) - max_r - 1, params.horizon as i64 + 1)?;
            let needs_rho = params.laws.0 == PairLaw::Equivariant || params.laws.1 == PairLaw::Equivariant;
            let rho = if needs_rho {
                let d = equivariant_density(&tower, 0, params.n_back, 0.05)?;
                let cdf = weights_cdf(&d);
                Some((d, cdf))
            } else {
                None
            };
            let rows: Vec<Result<(Observation, Vec<u64>, Option<usize>)>> = (0..params.samples as u64)
                .into_par_iter()
                .map(|i| {
                    let x = draw(&tower, params.laws.0, rho.as_ref(), tag("pair_x"), i)?;
                    let y = draw(&tower, params.laws.1, rho.as_ref(), tag("pair_y"), i)?;
                    let tr = coupling_trace(&tower, &x, &y, params.ell0, params.horizon)?;
                    check_trace(&tower, &tr)?;
                    let gaps: Vec<u64> = tr.taus.windows(2).map(|w| w[1] - w[0]).collect();
                    let obs = match tr.t {
                        Some(t) => Observation::event(t),
                        None => Observation::censored_at(params.horizon),
                    };
                    Ok((obs, gaps, tr.t.map(|_| tr.taus.len())))
                })
                .collect();
            let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
            let obs = rows.iter().map(|r| r.0).collect();
            let gaps = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
            // (index of the joint return, resolved) per pair
            let idx = rows.iter().map(|r| (r.2.unwrap_or(0), r.2.is_some())).collect();
            Ok((obs, gaps, idx, rows.len()))
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;

    let mut per_omega = Vec::with_capacity(specs.len());
    let mut per_omega_censored = Vec::with_capacity(specs.len());
    let mut pooled_obs = Vec::new();
    let mut gaps = Vec::new();
    let mut stops = Vec::new();
    let mut checked = 0;
    for (spec, (obs, g, idx, n)) in specs.iter().zip(per) {
        per_omega.push(kaplan_meier(&obs, &params.ns, "joint_tail", spec.seed as i64));
        per_omega_censored.push(crate::stats::survival::censored_fraction(&obs, params.horizon));
        pooled_obs.extend(obs);
        gaps.extend(g);
        stops.extend(idx);
        checked += n;
    }
    let pooled = kaplan_meier(&pooled_obs, &params.ns, "joint_tail_pooled", -1);
    let censored_fraction = crate::stats::survival::censored_fraction(&pooled_obs, params.horizon);

    let fit = fit_stretched_exp(&pooled, &params.window).ok();
    let refit = fit.as_ref().and_then(|f| match f.n0 {
        WaitingIndex::At(n0) => fit_stretched_exp(&pooled, &params.window.starting_at(n0)).ok(),
        WaitingIndex::BeyondHorizon => None,
    });
    let waiting = match &fit {
        Some(f) => per_omega.iter().map(|s| (s.omega_id, waiting_index(s, f))).collect(),
        None => vec![],
    };
    let widened_ci = match &fit {
        Some(f) => {
            let inside = |o: &&Observation| !o.censored && o.time >= f.window.n_lo && o.time <= f.window.n_hi;
            pooled_obs.iter().filter(inside).count() < 30
        }
        None => true,
    };

    // gap tail against the mean return-time tail
    let gap_ratio = {
        let fibers: Vec<_> = specs.iter().map(|s| s.fiber(0)).collect();
        let l0 = params.ell0 as u64;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for n in 0..params.horizon.min(64) {
            let emp = gaps.iter().filter(|&&g| g > l0 + n).count() as f64 / gaps.len().max(1) as f64;
            let law = fibers.iter().map(|f| f.tail(n as u32)).sum::<f64>() / fibers.len() as f64;
            if emp * gaps.len() as f64 >= 20.0 && law > 1e-6 {
                lo = lo.min(emp / law);
                hi = hi.max(emp / law);
            }
        }
        (hi > 0.0).then_some((lo, hi))
    };

    let max_i = stops.iter().filter(|s| s.1).map(|s| s.0).max().unwrap_or(0);
    let hazards = (2..=max_i)
        .map(|i| {
            let at_risk = stops.iter().filter(|s| !s.1 || s.0 >= i).count();
            let events = stops.iter().filter(|s| s.1 && s.0 == i).count();
            if at_risk == 0 {
                0.0
            } else {
                events as f64 / at_risk as f64
            }
        })
        .collect();

    Ok(JointTail {
        per_omega,
        pooled,
        per_omega_censored,
        censored_fraction,
        fit,
        refit,
        waiting,
        widened_ci,
        gap_ratio,
        hazards,
        traces_checked: checked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionK {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
    pub upsilon: f64,
    #[serde(rename = "K")]
    pub k: u64,
    pub horizon: u64,
    /// `n^upsilon + m^upsilon >= (n + m)^upsilon` on the checked grid.
    pub subadditive: bool,
    /// Largest `log((b*b)_p / b_p)` at `K` over `2K <= p <= horizon` (nonpositive).
    pub worst_log_ratio: f64,
    /// A `p` where `K - 1` fails, witnessing minimality.
    pub witness: Option<u64>,
}

/// `Some(p)` for the first `p <= horizon` with `(b*b)_p > b_p`, else the worst log ratio.
fn convolution_holds(la: &[f64], k: u64, horizon: u64) -> std::result::Result<f64, u64> {
    let mut worst = f64::NEG_INFINITY;
    for p in (2 * k)..=horizon {
        let lp = la[p as usize];
        let (mut s, mut n) = (0.0f64, k);
        // terms t_n = a_n a_{p-n} / a_p shrink towards n = p/2
        while n <= p - n {
            let t = (la[n as usize] + la[(p - n) as usize] - lp).exp();
            let w = if n == p - n { 1.0 } else { 2.0 };
            s += w * t;
            if s > 1.0 + 1e-12 {
                return Err(p);
            }
            let remaining = (p / 2).saturating_sub(n) as f64;
            if s + 2.0 * remaining * t <= 1.0 && s + 2.0 * remaining * t < 1e-3 {
                s += 2.0 * remaining * t;
                break;
            }
            n += 1;
        }
        worst = worst.max(s.ln());
    }
    Ok(worst)
}

/// Smallest `K` for which `b_n = 1{n >= K} C exp(-gamma n^upsilon)` satisfies
/// `(b*b)_p <= b_p` for every `p <= horizon`.
pub fn min_convolution_k(c: f64, gamma: f64, upsilon: f64, horizon: u64, cap: u64) -> Result<ConvolutionK> {
    if !(c > 0.0 && gamma > 0.0 && upsilon > 0.0 && upsilon <= 1.0) {
        return invalid(format!("need C, gamma > 0 and upsilon in (0, 1]; got ({c}, {gamma}, {upsilon})"));
    }
    let la: Vec<f64> = (0..=horizon).map(|n| c.ln() - gamma * (n as f64).powf(upsilon)).collect();
    let holds = |k: u64| convolution_holds(&la, k, horizon).is_ok();
    let mut hi = 1u64;
    while !holds(hi) {
        if hi >= cap {
            return Err(Error::Fit(format!(
                "no K <= {cap} satisfies (b*b)_p <= b_p up to p = {horizon} for (C, gamma, upsilon) = ({c}, {gamma}, {upsilon})"
            )));
        }
        hi = (hi * 2).min(cap);
    }
    let mut lo = hi / 2;
    // invariant: holds(hi), and lo == 0 or !holds(lo)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let worst = convolution_holds(&la, hi, horizon).expect("K verified");
    let witness = if hi > 1 { convolution_holds(&la, hi - 1, horizon).err() } else { None };
    let subadditive = (1..=100u64)
        .all(|n| (1..=100u64).all(|m| (n as f64).powf(upsilon) + (m as f64).powf(upsilon) >= ((n + m) as f64).powf(upsilon) - 1e-12));
    Ok(ConvolutionK { c, gamma, upsilon, k: hi, horizon, subadditive, worst_log_ratio: worst, witness })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tower::{Cell, ReturnLaw};

    fn two_cell(seed: u64) -> Tower {
        let cells = vec![Cell { mass: 0.4, r: 2 }, Cell { mass: 0.6, r: 3 }];
        let spec = TowerSpec::new(ReturnLaw::Cells { cells }, seed, 3).unwrap();
        Tower::new(spec, -10, 400).unwrap()
    }

    #[test]
    fn overlap_of_r_one_is_one() {
        let spec = TowerSpec::new(ReturnLaw::Fixed { r: 1 }, 0, 1).unwrap();
        let t = Tower::new(spec, 0, 20).unwrap();
        let v = overlap_v(&t, 0, 10).unwrap();
        assert!(v.values.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        assert_eq!(v.ell0, Some(1));
    }

    #[test]
    fn two_cell_overlap_solves_renewal_equation() {
        let t = two_cell(0);
        let v = overlap_v(&t, 0, 30).unwrap();
        // u_n = 0.4 u_{n-2} + 0.6 u_{n-3}
        let mut u = vec![1.0, 0.0, 0.4];
        for n in 3..=30 {
            u.push(0.4 * u[n - 2] + 0.6 * u[n - 3]);
        }
        for (a, b) in v.values.iter().zip(&u) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(v.ell0, Some(2));
        let mc = overlap_v_monte_carlo(&t, 0, 30, 20_000).unwrap();
        for ((m, se), b) in mc.iter().zip(&u) {
            assert!((m - b).abs() <= 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn period_two_tower_violates_gcd() {
        let spec = TowerSpec::new(ReturnLaw::Fixed { r: 2 }, 0, 2).unwrap();
        let t = Tower::new(spec, 0, 50).unwrap();
        assert_eq!(overlap_v(&t, 0, 40).unwrap().ell0, None);
    }

    #[test]
    fn r_one_trace() {
        let spec = TowerSpec::new(ReturnLaw::Fixed { r: 1 }, 0, 1).unwrap();
        let t = Tower::new(spec, 0, 20).unwrap();
        let tr = coupling_trace(&t, &TowerPoint::base(0.2, 0), &TowerPoint::base(0.7, 0), 1, 10).unwrap();
        assert_eq!(tr.taus, vec![1, 2]);
        assert_eq!(tr.t, Some(2));
        check_trace(&t, &tr).unwrap();
    }

    #[test]
    fn convolution_k_for_pure_exponential() {
        // upsilon = 1: (b*b)_p = (p - 2K + 1) C^2 e^{-p}, so need (H - 2K + 1) C <= 1
        let r = min_convolution_k(1.0, 1.0, 1.0, 1000, 10_000).unwrap();
        assert_eq!(r.k, 500);
        assert_eq!(r.witness, Some(999));
        let r = min_convolution_k(0.1, 1.0, 1.0, 1000, 10_000).unwrap();
        assert_eq!(r.k, 496);
    }
}
