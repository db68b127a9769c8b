//! Random Young towers over a unit-interval base.
//!
//! Fiber `j` stands for `sigma^j(omega)`. Its base carries a partition into
//! cells ordered by return time, each mapped onto the base by a full affine
//! branch, so `{R_j > l}` is always a terminal interval `[start, 1)`.
//! A point `(x, l)` of fiber `j` has its base coordinate in fiber `j - l`.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gmy::{construct_partition, GmyParams, RandomPartition, ReferenceBall};
use crate::mapcore::MapFamily;
use crate::noise::{sub_seed, tag, CounterRng, Realization};
use crate::stats::correlation::Direction;
use crate::stats::DecaySeries;

/// Prescribed law of `R_omega` on the base of each fiber.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ReturnLaw {
    Fixed { r: u32 },
    /// `m(R > n) = (1 - p_j)^n` with `p_j = p (1 + jitter (2 U_j - 1))`.
    Geometric { p: f64, jitter: f64 },
    /// `m(R > n) = min(1, C exp(-gamma n^upsilon))`.
    StretchedExp {
        #[serde(rename = "C")]
        c: f64,
        gamma: f64,
        upsilon: f64,
    },
    /// Stretched-exponential bulk of mass `1 - weight` plus mass `weight`
    /// returning at `max(g0_j, 1)`, with `P(g0 = k) = (1 - onset_p)^k onset_p`.
    NonUniform {
        #[serde(rename = "C")]
        c: f64,
        gamma: f64,
        upsilon: f64,
        weight: f64,
        onset_p: f64,
    },
    /// The same explicit cells in every fiber.
    Cells { cells: Vec<Cell> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mass: f64,
    #[serde(rename = "R")]
    pub r: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    #[serde(flatten)]
    pub law: ReturnLaw,
    pub seed: u64,
    /// Return times are truncated here; the remaining mass returns at `max_return`.
    pub max_return: u32,
    /// Equal affine sub-branches per return value.
    pub branches: u32,
    /// Contraction of the separation metric `beta^s`.
    pub beta: f64,
}

impl TowerSpec {
    pub fn new(law: ReturnLaw, seed: u64, max_return: u32) -> Result<Self> {
        let spec = Self { law, seed, max_return, branches: 1, beta: 0.5 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_branches(mut self, branches: u32) -> Result<Self> {
        self.branches = branches;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Tower with the return times of `partition` (masses relative to
    /// `m(Delta)`); unreturned mass is given `R = horizon + 1`.
    pub fn from_partition(partition: &RandomPartition) -> Result<Self> {
        let total = partition.ball.mass();
        let mut cells: Vec<Cell> = partition
            .level_masses()
            .into_iter()
            .map(|(r, m)| Cell { mass: m / total, r: r as u32 })
            .collect();
        let rest = partition.remainder_mass / total;
        let max_return = partition.horizon as u32 + 1;
        if rest > 0.0 {
            cells.push(Cell { mass: rest, r: max_return });
        }
        let beta = if partition.kappa > 0.0 && partition.kappa < 1.0 { partition.kappa } else { 0.5 };
        let spec = Self { law: ReturnLaw::Cells { cells }, seed: partition.omega.seed(), max_return, branches: 1, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_return == 0 || self.branches == 0 || !(self.beta > 0.0 && self.beta < 1.0) {
            return invalid("tower needs max_return >= 1, branches >= 1 and beta in (0, 1)");
        }
        let ok = match &self.law {
            ReturnLaw::Fixed { r } => *r >= 1 && *r <= self.max_return,
            ReturnLaw::Geometric { p, jitter } => {
                *p > 0.0 && *p <= 1.0 && *jitter >= 0.0 && *jitter < 1.0 && p * (1.0 + jitter) <= 1.0
            }
            ReturnLaw::StretchedExp { c, gamma, upsilon } => *c > 0.0 && *gamma > 0.0 && *upsilon > 0.0 && *upsilon <= 1.0,
            ReturnLaw::NonUniform { c, gamma, upsilon, weight, onset_p } => {
                *c > 0.0
                    && *gamma > 0.0
                    && *upsilon > 0.0
                    && *upsilon <= 1.0
                    && (0.0..1.0).contains(weight)
                    && *onset_p > 0.0
                    && *onset_p < 1.0
            }
            ReturnLaw::Cells { cells } => {
                let total: f64 = cells.iter().map(|c| c.mass).sum();
                !cells.is_empty()
                    && cells.iter().all(|c| c.mass >= 0.0 && c.r >= 1 && c.r <= self.max_return)
                    && (total - 1.0).abs() < 1e-9
            }
        };
        if !ok {
            return invalid(format!("inadmissible return law {:?} (max_return {})", self.law, self.max_return));
        }
        Ok(())
    }

    fn fiber_rng(&self, j: i64) -> CounterRng {
        CounterRng::for_task(self.seed, tag("tower_fiber"), j as u64)
    }

    /// `m(R_j > n)` before truncation, for `n >= 0`.
    fn law_tail(&self, j: i64) -> Box<dyn Fn(u32) -> f64 + '_> {
        match &self.law {
            ReturnLaw::Fixed { r } => {
                let r = *r;
                Box::new(move |n| if n < r { 1.0 } else { 0.0 })
            }
            ReturnLaw::Geometric { p, jitter } => {
                let u = self.fiber_rng(j).uniform();
                let q = 1.0 - p * (1.0 + jitter * (2.0 * u - 1.0));
                Box::new(move |n| q.powi(n as i32))
            }
            ReturnLaw::StretchedExp { c, gamma, upsilon } => {
                let (c, g, v) = (*c, *gamma, *upsilon);
                Box::new(move |n| if n == 0 { 1.0 } else { (c * (-g * (n as f64).powf(v)).exp()).min(1.0) })
            }
            ReturnLaw::NonUniform { c, gamma, upsilon, weight, onset_p } => {
                let (c, g, v, w) = (*c, *gamma, *upsilon, *weight);
                let u = 1.0 - self.fiber_rng(j).uniform();
                let g0 = ((u.ln() / (1.0 - onset_p).ln()).floor() as u32).max(1);
                Box::new(move |n| {
                    let bulk = if n == 0 { 1.0 } else { (c * (-g * (n as f64).powf(v)).exp()).min(1.0) };
                    (1.0 - w) * bulk + if n < g0 { w } else { 0.0 }
                })
            }
            ReturnLaw::Cells { cells } => {
                let cells = cells.clone();
                Box::new(move |n| cells.iter().filter(|c| c.r > n).map(|c| c.mass).sum())
            }
        }
    }

    /// The base partition of fiber `j`.
    pub fn fiber(&self, j: i64) -> Fiber {
        let tail = self.law_tail(j);
        let mut returns = Vec::new();
        let mut cuts = vec![0.0];
        let mut mass_by_r = Vec::new();
        let mut prev = 1.0f64;
        for r in 1..=self.max_return {
            let t = if r == self.max_return { 0.0 } else { tail(r).clamp(0.0, prev) };
            let m = prev - t;
            prev = t;
            if m > 0.0 {
                mass_by_r.push((r, m));
            }
        }
        let mut acc = 0.0;
        for (r, m) in mass_by_r {
            for _ in 0..self.branches {
                acc += m / self.branches as f64;
                cuts.push(acc);
                returns.push(r);
            }
        }
        *cuts.last_mut().expect("one cell") = 1.0;
        Fiber { cuts, returns }
    }
}

/// Cells `[cuts[i], cuts[i+1])` with nondecreasing return times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fiber {
    pub cuts: Vec<f64>,
    pub returns: Vec<u32>,
}

impl Fiber {
    pub fn cell_of(&self, x: f64) -> usize {
        let i = self.cuts[1..].partition_point(|&c| c <= x);
        i.min(self.returns.len() - 1)
    }

    pub fn return_time(&self, x: f64) -> u32 {
        self.returns[self.cell_of(x)]
    }

    /// Left end of `{R > n}`.
    pub fn tail_start(&self, n: u32) -> f64 {
        let i = self.returns.partition_point(|&r| r <= n);
        self.cuts[i]
    }

    /// `m(R > n)`.
    pub fn tail(&self, n: u32) -> f64 {
        1.0 - self.tail_start(n)
    }

    /// `m(R = r)`.
    pub fn mass_at(&self, r: u32) -> f64 {
        if r == 0 {
            return 0.0;
        }
        self.tail(r - 1) - self.tail(r)
    }

    /// Full affine branch of the cell containing `x`.
    pub fn branch(&self, x: f64) -> f64 {
        let i = self.cell_of(x);
        let (a, b) = (self.cuts[i], self.cuts[i + 1]);
        ((x - a) / (b - a)).clamp(0.0, 1.0 - f64::EPSILON / 2.0)
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.returns
            .iter()
            .enumerate()
            .map(|(i, &r)| Cell { mass: self.cuts[i + 1] - self.cuts[i], r })
            .collect()
    }

    pub fn mean_return(&self) -> f64 {
        self.cells().iter().map(|c| c.mass * c.r as f64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerPoint {
    pub x: f64,
    pub level: u32,
    /// Offset `j` of the fiber `sigma^j(omega)` the point lives in.
    pub fiber: i64,
}

impl TowerPoint {
    pub fn base(x: f64, fiber: i64) -> Self {
        Self { x, level: 0, fiber }
    }
}

/// A tower with fibers cached on `[lo, hi]`.
pub struct Tower {
    spec: TowerSpec,
    lo: i64,
    cache: Vec<OnceLock<Fiber>>,
}

impl Tower {
    pub fn new(spec: TowerSpec, lo: i64, hi: i64) -> Result<Self> {
        spec.validate()?;
        if hi < lo {
            return invalid("tower fiber range is empty");
        }
        let cache = (lo..=hi).map(|_| OnceLock::new()).collect();
        Ok(Self { spec, lo, cache })
    }

    pub fn spec(&self) -> &TowerSpec {
        &self.spec
    }

    pub fn range(&self) -> (i64, i64) {
        (self.lo, self.lo + self.cache.len() as i64 - 1)
    }

    pub fn fiber(&self, j: i64) -> Result<&Fiber> {
        let i = j - self.lo;
        if i < 0 || i as usize >= self.cache.len() {
            let (lo, hi) = self.range();
            return Err(Error::InvalidParameter(format!("fiber {j} outside the cached range [{lo}, {hi}]")));
        }
        Ok(self.cache[i as usize].get_or_init(|| self.spec.fiber(j)))
    }

    pub fn is_valid(&self, p: &TowerPoint) -> Result<bool> {
        let f = self.fiber(p.fiber - p.level as i64)?;
        Ok((0.0..1.0).contains(&p.x) && p.level < f.return_time(p.x))
    }

    /// `F_omega`: climb, or drop through the branch at the top level.
    pub fn map(&self, p: &TowerPoint) -> Result<TowerPoint> {
        let f = self.fiber(p.fiber - p.level as i64)?;
        let r = f.return_time(p.x);
        if p.level >= r {
            return invalid(format!("level {} exceeds R - 1 = {} at x = {}", p.level, r - 1, p.x));
        }
        Ok(if p.level + 1 < r {
            TowerPoint { level: p.level + 1, fiber: p.fiber + 1, ..*p }
        } else {
            TowerPoint { x: f.branch(p.x), level: 0, fiber: p.fiber + 1 }
        })
    }

    pub fn iterate(&self, p: &TowerPoint, n: u64) -> Result<TowerPoint> {
        let mut q = *p;
        for _ in 0..n {
            q = self.map(&q)?;
        }
        Ok(q)
    }

    /// `m(Delta_j) = sum_l m(R_{j-l} > l)`, over levels `l < levels`.
    pub fn fiber_mass(&self, j: i64, levels: u32) -> Result<f64> {
        let mut total = 0.0;
        for l in 0..levels {
            total += self.fiber(j - l as i64)?.tail(l);
        }
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationTime {
    At(u32),
    /// Not separated within the horizon.
    AtLeast(u32),
}

/// Number of returns before two base points of fiber `j` fall into different cells.
pub fn separation_time(tower: &Tower, j: i64, x: f64, y: f64, horizon: u32) -> Result<SeparationTime> {
    let (mut x, mut y, mut j) = (x, y, j);
    for s in 0..horizon {
        let f = tower.fiber(j)?;
        let c = f.cell_of(x);
        if c != f.cell_of(y) {
            return Ok(SeparationTime::At(s));
        }
        j += f.returns[c] as i64;
        x = f.branch(x);
        y = f.branch(y);
    }
    Ok(SeparationTime::AtLeast(horizon))
}

/// Density of `nu_j` with respect to the tower measure: constant `levels[l]`
/// on `{R_{j-l} > l}` at level `l`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiberDensity {
    pub fiber: i64,
    pub n_back: usize,
    pub levels: Vec<f64>,
    /// Tower measure of each level.
    pub level_mass: Vec<f64>,
    pub sup: f64,
    /// Smallest value on levels of positive mass.
    pub min: f64,
    /// Largest `|log(rho(x)/rho(y))| / beta^{s(x,y)}` over same-level pairs.
    pub log_holder: f64,
    /// L1 distance to the average built with `n_back / 2`.
    pub cesaro_change: f64,
    pub converged: bool,
}

impl FiberDensity {
    pub fn total(&self) -> f64 {
        self.levels.iter().zip(&self.level_mass).map(|(a, m)| a * m).sum()
    }

    /// Weight of level `l` under `nu_j`.
    pub fn level_weights(&self) -> Vec<f64> {
        self.levels.iter().zip(&self.level_mass).map(|(a, m)| a * m).collect()
    }
}

/// Arrival masses at level 0 of fibers `first..=last` for unit sources at
/// `sources`, by the renewal recursion `U_i = src_i + sum_r U_{i-r} m_{i-r}(R = r)`.
pub(crate) fn renewal(tower: &Tower, first: i64, last: i64, sources: std::ops::RangeInclusive<i64>) -> Result<Vec<f64>> {
    let len = (last - first + 1) as usize;
    let mut u = vec![0.0; len];
    let max_r = tower.spec.max_return as usize;
    for i in 0..len {
        let j = first + i as i64;
        let mut v = if sources.contains(&j) { 1.0 } else { 0.0 };
        for r in 1..=max_r.min(i) {
            let src = j - r as i64;
            let w = u[i - r];
            if w != 0.0 {
                v += w * tower.fiber(src)?.mass_at(r as u32);
            }
        }
        u[i] = v;
    }
    Ok(u)
}

fn cesaro_levels(tower: &Tower, j: i64, n_back: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = j - n_back as i64 + 1;
    let u = renewal(tower, first, j, first..=j)?;
    let mut levels = Vec::with_capacity(n_back);
    let mut mass = Vec::with_capacity(n_back);
    for l in 0..n_back {
        let src = j - l as i64;
        let t = tower.fiber(src)?.tail(l as u32);
        if t <= 0.0 && l as u32 >= tower.spec.max_return {
            break;
        }
        levels.push(u[n_back - 1 - l] / n_back as f64);
        mass.push(t);
    }
    Ok((levels, mass))
}

/// `rho_j`: Cesàro average over `k < n_back` of the push-forwards of base
/// Lebesgue from fiber `j - k`. The tower needs fibers `j - n_back - max_return ..= j`.
pub fn equivariant_density(tower: &Tower, j: i64, n_back: usize, tolerance: f64) -> Result<FiberDensity> {
    if n_back < 2 {
        return invalid("equivariant density needs n_back >= 2");
    }
    let (levels, level_mass) = cesaro_levels(tower, j, n_back)?;
    let (half, half_mass) = cesaro_levels(tower, j, n_back / 2)?;
    let mut change = 0.0;
    for l in 0..levels.len().max(half.len()) {
        let a = levels.get(l).copied().unwrap_or(0.0);
        let b = half.get(l).copied().unwrap_or(0.0);
        let m = level_mass.get(l).or(half_mass.get(l)).copied().unwrap_or(0.0);
        change += (a - b).abs() * m;
    }
    let positive: Vec<f64> = levels.iter().zip(&level_mass).filter(|(_, m)| **m > 0.0).map(|(a, _)| *a).collect();
    let sup = positive.iter().copied().fold(0.0, f64::max);
    let min = positive.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FiberDensity {
        fiber: j,
        n_back,
        sup,
        min,
        // affine full branches keep each level's density constant
        log_holder: 0.0,
        cesaro_change: change,
        converged: change <= tolerance,
        levels,
        level_mass,
    })
}

/// `||(F_j)_* rho_j - rho_{j+1}||_1`.
pub fn equivariance_defect(tower: &Tower, rho: &FiberDensity, next: &FiberDensity) -> Result<f64> {
    let j = rho.fiber;
    if next.fiber != j + 1 {
        return invalid("equivariance defect compares consecutive fibers");
    }
    let mut pushed = vec![0.0; rho.levels.len() + 1];
    for (l, &a) in rho.levels.iter().enumerate() {
        let f = tower.fiber(j - l as i64)?;
        pushed[0] += a * f.mass_at(l as u32 + 1);
        pushed[l + 1] = a;
    }
    let mut defect = 0.0;
    for (l, &p) in pushed.iter().enumerate() {
        let m = tower.fiber(j + 1 - l as i64)?.tail(l as u32);
        let q = next.levels.get(l).copied().unwrap_or(0.0);
        defect += (p - q).abs() * m;
    }
    Ok(defect)
}

/// Sample `i` of `nu_j`.
pub fn sample_density(tower: &Tower, rho: &FiberDensity, weights_cdf: &[f64], stream: u64, i: u64) -> Result<TowerPoint> {
    let mut rng = CounterRng::for_task(sub_seed(tower.spec.seed, stream, rho.fiber as u64), tag("nu_sample"), i);
    let total = *weights_cdf.last().expect("nonempty");
    let u = rng.uniform() * total;
    let l = weights_cdf.partition_point(|&c| c <= u).min(weights_cdf.len() - 1);
    let f = tower.fiber(rho.fiber - l as i64)?;
    let a = f.tail_start(l as u32);
    let x = (a + (1.0 - a) * rng.uniform()).min(1.0 - f64::EPSILON / 2.0);
    Ok(TowerPoint { x, level: l as u32, fiber: rho.fiber })
}

pub fn weights_cdf(rho: &FiberDensity) -> Vec<f64> {
    let mut acc = 0.0;
    rho.level_weights()
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

pub type TowerObservable<'a> = &'a (dyn Fn(f64, u32) -> f64 + Sync);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TowerCorrelationParams {
    pub ns: Vec<u64>,
    pub n_back: usize,
    pub samples: usize,
    pub density_tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TowerCorrelation {
    pub direction: Direction,
    pub series: DecaySeries,
    pub signed: Vec<f64>,
    /// Points whose standard error exceeds the estimate.
    pub widened_ci: Vec<u64>,
}

/// Fibers a correlation run needs cached, relative to its base fiber 0.
pub fn correlation_fiber_range(spec: &TowerSpec, params: &TowerCorrelationParams) -> (i64, i64) {
    let max_n = params.ns.iter().max().copied().unwrap_or(0) as i64;
    let lo = -max_n - params.n_back as i64 - spec.max_return as i64 - 1;
    (lo, max_n + 1)
}

/// Monte Carlo `C̄_omega^±(phi, psi, n)` on `nu`-distributed samples: the
/// future series starts at fiber 0, the past one at fiber `-n`.
pub fn tower_correlation(
    tower: &Tower,
    phi: TowerObservable<'_>,
    psi: TowerObservable<'_>,
    params: &TowerCorrelationParams,
    direction: Direction,
) -> Result<TowerCorrelation> {
    if params.samples < 2 {
        return invalid("tower correlation needs at least 2 samples");
    }
    let stream = tag("tower_correlation");
    let mut series = DecaySeries::new(format!("tower_correlation_{}", direction.label()), tower.spec.seed as i64);
    let mut signed = Vec::new();
    let mut widened = Vec::new();
    let cov_at = |start: i64, steps: &[u64]| -> Result<Vec<(f64, f64)>> {
        let rho = equivariant_density(tower, start, params.n_back, params.density_tolerance)?;
        let cdf = weights_cdf(&rho);
        let rows: Vec<Result<(Vec<f64>, f64)>> = (0..params.samples)
            .into_par_iter()
            .map(|i| {
                let p = sample_density(tower, &rho, &cdf, stream, i as u64)?;
                let mut q = p;
                let mut at = 0u64;
                let mut out = Vec::with_capacity(steps.len());
                for &n in steps {
                    while at < n {
                        q = tower.map(&q)?;
                        at += 1;
                    }
                    out.push(phi(q.x, q.level));
                }
                Ok((out, psi(p.x, p.level)))
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let m = rows.len() as f64;
        let mq = rows.iter().map(|r| r.1).sum::<f64>() / m;
        Ok((0..steps.len())
            .map(|k| {
                let mp = rows.iter().map(|r| r.0[k]).sum::<f64>() / m;
                let us: Vec<f64> = rows.iter().map(|r| (r.0[k] - mp) * (r.1 - mq)).collect();
                let cov = us.iter().sum::<f64>() / m;
                let var = us.iter().map(|u| (u - cov).powi(2)).sum::<f64>() / (m - 1.0);
                (cov, (var / m).sqrt())
            })
            .collect())
    };
    let estimates: Vec<(f64, f64)> = match direction {
        Direction::Future => cov_at(0, &params.ns)?,
        Direction::Past => {
            let mut out = Vec::with_capacity(params.ns.len());
            for &n in &params.ns {
                out.push(cov_at(-(n as i64), &[n])?[0]);
            }
            out
        }
    };
    for (&n, (cov, se)) in params.ns.iter().zip(estimates) {
        if se > cov.abs() {
            widened.push(n);
        }
        signed.push(cov);
        series.push(n, cov.abs(), se, params.samples as u64, false);
    }
    Ok(TowerCorrelation { direction, series, signed, widened_ci: widened })
}

/// Tower over the induced partitions of a concrete 1-D family, with base
/// coordinates in the reference ball and `F = f^R` computed by the family.
pub struct GmyTower<'a> {
    pub family: &'a MapFamily,
    pub omega: Realization,
    pub ball: ReferenceBall,
    pub horizon: usize,
    pub params: GmyParams,
    lo: i64,
    cache: Vec<OnceLock<Result<RandomPartition>>>,
}

impl<'a> GmyTower<'a> {
    pub fn new(
        family: &'a MapFamily,
        omega: Realization,
        ball: ReferenceBall,
        horizon: usize,
        params: GmyParams,
        lo: i64,
        hi: i64,
    ) -> Result<Self> {
        if hi < lo {
            return invalid("tower fiber range is empty");
        }
        Ok(Self { family, omega, ball, horizon, params, lo, cache: (lo..=hi).map(|_| OnceLock::new()).collect() })
    }

    pub fn partition(&self, j: i64) -> Result<&RandomPartition> {
        let i = j - self.lo;
        if i < 0 || i as usize >= self.cache.len() {
            return Err(Error::InvalidParameter(format!("fiber {j} outside the cached range")));
        }
        let cell = self.cache[i as usize]
            .get_or_init(|| construct_partition(self.family, &self.omega.shift(j), &self.ball, self.horizon, &self.params));
        cell.as_ref().map_err(|e| Error::Construction(format!("partition of fiber {j}: {e}")))
    }

    /// Builds every cached partition (in parallel).
    pub fn prefetch(&self) -> Result<()> {
        let n = self.cache.len() as i64;
        (0..n).into_par_iter().try_for_each(|i| self.partition(self.lo + i).map(|_| ()))
    }

    fn return_time(&self, p: &TowerPoint) -> Result<usize> {
        self.partition(p.fiber - p.level as i64)?
            .return_time(p.x)
            .ok_or_else(|| Error::Construction(format!("{} is in the unpartitioned remainder", p.x)))
    }

    pub fn map(&self, p: &TowerPoint) -> Result<TowerPoint> {
        let r = self.return_time(p)?;
        if p.level as usize + 1 < r {
            return Ok(TowerPoint { level: p.level + 1, fiber: p.fiber + 1, ..*p });
        }
        let start = self.omega.shift(p.fiber - p.level as i64);
        let mut y = p.x;
        for k in 0..r {
            y = self.family.eval(&start.parameter_at(k as i64), &[y])?[0];
        }
        Ok(TowerPoint { x: y, level: 0, fiber: p.fiber + 1 })
    }

    /// `pi_j(x, l) = f^l_{sigma^{-l}}(x)`, seen from fiber `p.fiber`.
    pub fn project(&self, p: &TowerPoint) -> Result<f64> {
        let start = self.omega.shift(p.fiber - p.level as i64);
        let mut y = p.x;
        for k in 0..p.level {
            y = self.family.eval(&start.parameter_at(k as i64), &[y])?[0];
        }
        Ok(y)
    }

    /// Point `i` of a sample spread over levels `< max_level` of fiber `j`:
    /// uniform level, then Lebesgue on the elements of fiber `j - l` with `R > l`.
    pub fn sample(&self, j: i64, max_level: u32, stream: u64, i: u64) -> Result<Option<TowerPoint>> {
        let mut rng = CounterRng::for_task(sub_seed(self.omega.seed(), stream, j as u64), tag("gmy_tower"), i);
        let l = rng.below(max_level as usize) as u32;
        let part = self.partition(j - l as i64)?;
        let eligible: Vec<_> = part.elements.iter().filter(|e| e.r > l as usize).collect();
        let total: f64 = eligible.iter().map(|e| e.mass()).sum();
        if total <= 0.0 {
            return Ok(None);
        }
        let mut u = rng.uniform() * total;
        for e in eligible {
            if u < e.mass() {
                return Ok(Some(TowerPoint { x: e.left + u, level: l, fiber: j }));
            }
            u -= e.mass();
        }
        Ok(None)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub samples: usize,
    /// Largest `|f_omega(pi(p)) - pi_{sigma omega}(F p)|`.
    pub semiconjugacy_error: f64,
    pub points: Vec<f64>,
    /// Largest `|phi(pi p) - phi(pi q)| / beta^{s(p, q)}` over consecutive sampled pairs on a common level.
    pub lifted_holder: f64,
}

/// Projects sampled tower points of fiber 0 to `M` and checks the
/// semiconjugacy on each; `phi` is the observable lifted for the Hölder check.
pub fn project_to_m(
    tower: &GmyTower<'_>,
    samples: usize,
    max_level: u32,
    beta: f64,
    phi: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<ProjectionReport> {
    let stream = tag("projection");
    let pts: Vec<TowerPoint> = (0..samples as u64)
        .into_par_iter()
        .map(|i| tower.sample(0, max_level, stream, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let t0 = tower.omega.parameter_at(0);
    let checked: Vec<Result<(f64, f64)>> = pts
        .par_iter()
        .map(|p| {
            let x = tower.project(p)?;
            let lhs = tower.family.eval(&t0, &[x])?[0];
            let rhs = tower.project(&tower.map(p)?)?;
            Ok((x, (lhs - rhs).abs()))
        })
        .collect();
    let checked = checked.into_iter().collect::<Result<Vec<_>>>()?;
    let err = checked.iter().map(|c| c.1).fold(0.0, f64::max);
    if err > 1e-9 {
        return Err(Error::Construction(format!("semiconjugacy violated by {err:e}: partition and tower disagree")));
    }
    let mut holder = 0.0f64;
    let mut sorted: Vec<(u32, f64, f64)> = pts.iter().zip(&checked).map(|(p, c)| (p.level, p.x, c.0)).collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for w in sorted.windows(2) {
        let ((l1, x1, y1), (l2, x2, y2)) = (w[0], w[1]);
        if l1 != l2 {
            continue;
        }
        let part = tower.partition(-(l1 as i64))?;
        let (Some(e1), Some(e2)) = (part.element_at(x1), part.element_at(x2)) else { continue };
        // pairs in the same element separate no earlier than one return
        let s = if e1.left == e2.left { 1 } else { 0 };
        holder = holder.max((phi(y1) - phi(y2)).abs() / beta.powi(s));
    }
    Ok(ProjectionReport { samples: pts.len(), semiconjugacy_error: err, points: checked.iter().map(|c| c.0).collect(), lifted_holder: holder })
}
