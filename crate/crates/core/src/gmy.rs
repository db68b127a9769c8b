//! Random induced (Gibbs-Markov-Young) partitions of a reference ball for
//! one-dimensional families.
//!
//! At each step `n >= R0` the construction collects candidates
//! `U^1 = (f^{n+m}|V')^{-1}(Delta^1)` whose centre has hyperbolic time `n`,
//! keeps a first-fit maximal family that stays inside the unpartitioned part
//! of `Delta` and off the shrinking annuli of earlier elements, and records
//! the cores `U^0 = (f^{n+m}|V')^{-1}(Delta)` with return time `R = n + m`.
//!
//! Candidate centres are the preimages of `p` under `f^{n+m}`. They are found
//! by following `Delta` forward as a list of monotone branches ("pieces"),
//! which keeps the work proportional to the number of branches that can still
//! produce an element.

use std::collections::BTreeMap;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hyperbolic::{is_hyperbolic_time, pullback_offsets, push_offset, HyperbolicParams};
use crate::mapcore::{wrap_centered, FamilyKind, MapFamily, PhasePoint};
use crate::noise::{tag, Realization};
use crate::orbit::iterate_record;
use crate::stats::tail::sample_point;
use crate::stats::{DecaySeries, WindowPolicy};

/// Tolerance for straddling the critical point when splitting branches.
const FOLD_TOL: f64 = 1e-14;

/// `Delta = B(p, delta0)`, `Delta^1 = B(p, 2 delta0)` and the covering lag bound `N0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBall {
    pub center: f64,
    pub delta0: f64,
    /// Largest lag `m` allowed between the hyperbolic time and the return.
    pub lag: usize,
    /// Bound on `||(Df^j)^{-1}||`, `j <= m`, along the lag.
    pub k0: f64,
    /// Fraction of probed pre-balls whose images covered `Delta^1` (1 when not searched).
    pub coverage: f64,
}

impl ReferenceBall {
    pub fn new(center: f64, delta0: f64, lag: usize, k0: f64) -> Result<Self> {
        if !(delta0 > 0.0) || !(k0 >= 1.0) {
            return invalid(format!("reference ball needs delta0 > 0 and K0 >= 1, got ({delta0}, {k0})"));
        }
        Ok(Self { center, delta0, lag, k0, coverage: 1.0 })
    }

    pub fn lo(&self) -> f64 {
        self.center - self.delta0
    }

    pub fn hi(&self) -> f64 {
        self.center + self.delta0
    }

    pub fn mass(&self) -> f64 {
        2.0 * self.delta0
    }

    /// `Delta^1` must lie inside the phase space (inside one lift of the
    /// circle) and away from the critical set.
    pub fn validate_for(&self, family: &MapFamily) -> Result<()> {
        if !family.is_one_dimensional() {
            return Err(Error::Unsupported(format!("induced partitions are built for 1-D families, not {}", family.family_id())));
        }
        let (lo, hi) = (self.center - 2.0 * self.delta0, self.center + 2.0 * self.delta0);
        let (a, b) = family.space.bounds[0];
        if !(lo > a && hi < b) {
            return invalid(format!("Delta^1 = ({lo}, {hi}) is not inside the phase space ({a}, {b})"));
        }
        if family.critical.is_some() && lo <= 0.0 && hi >= 0.0 {
            return invalid(format!("Delta^1 = ({lo}, {hi}) meets the critical point"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmyParams {
    pub hyper: HyperbolicParams,
    /// Truncation scale of the recurrence clause.
    pub delta: f64,
    pub delta1: f64,
    /// Target for `||DF^{-1}||` on elements, which fixes `R0`.
    pub kappa_target: f64,
    /// Overrides the `R0` derived from `kappa_target`.
    pub initial_time: Option<usize>,
    /// Construction stops (and is marked truncated) beyond this many branches.
    pub max_pieces: usize,
}

impl GmyParams {
    pub fn new(hyper: HyperbolicParams, delta: f64, delta1: f64) -> Self {
        Self { hyper, delta, delta1, kappa_target: 0.9, initial_time: None, max_pieces: 4_000_000 }
    }

    pub fn delta1_prime(&self) -> f64 {
        self.delta1 / 12.0
    }

    /// Smallest `R0 >= 1` with `K0 lambda^{(R0 - N0)/2} < kappa_target`.
    pub fn r0(&self, ball: &ReferenceBall) -> usize {
        if let Some(r) = self.initial_time {
            return r.max(1);
        }
        let half_rate = -0.5 * self.hyper.log_lambda;
        let need = (ball.k0 / self.kappa_target).ln() / half_rate;
        let mut r = (ball.lag as f64 + need).floor().max(0.0) as usize;
        while ball.k0 * (-(r as f64 - ball.lag as f64) * half_rate).exp() >= self.kappa_target {
            r += 1;
        }
        while r > 1 && ball.k0 * (-((r - 1) as f64 - ball.lag as f64) * half_rate).exp() < self.kappa_target {
            r -= 1;
        }
        r.max(1)
    }
}

/// One element `U^0` of the partition with its return data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub left: f64,
    pub right: f64,
    /// The candidate `U^1` the element was cut from.
    pub u1: (f64, f64),
    /// Preimage of `p` under `f^R` inside the element.
    pub center: f64,
    /// Hyperbolic time.
    pub n: usize,
    /// Lag.
    pub m: usize,
    /// Return time `n + m`.
    #[serde(rename = "R")]
    pub r: usize,
    /// Largest `||DF^{-1}||` seen on the element.
    pub kappa: f64,
    /// Largest `|log|DF(y)| - log|DF(z)|| / |F y - F z|` seen on the element.
    pub distortion: f64,
}

impl Element {
    pub fn mass(&self) -> f64 {
        self.right - self.left
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub tested: u64,
    pub critical: u64,
    pub not_hyperbolic: u64,
    pub no_preball: u64,
    pub no_cover: u64,
    pub outside_ball: u64,
    pub excluded: u64,
    pub accepted: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RandomPartition {
    pub omega: Realization,
    pub ball: ReferenceBall,
    pub r0: usize,
    /// Last completed step; every element with `R <= horizon` is present.
    pub horizon: usize,
    pub truncated: bool,
    /// Elements sorted by position.
    pub elements: Vec<Element>,
    /// `m(Delta^N)`: the part of `Delta` not selected by the horizon.
    pub remainder_mass: f64,
    /// Part of the remainder held inside the current annuli.
    pub annulus_mass: f64,
    /// Part of the remainder outside every annulus.
    pub free_mass: f64,
    pub kappa: f64,
    pub distortion: f64,
    /// Largest distance between `F(endpoint)` and `partial Delta`.
    pub markov_defect: f64,
    pub stats: CandidateStats,
}

impl RandomPartition {
    /// Element containing `x`, if any.
    pub fn element_at(&self, x: f64) -> Option<&Element> {
        let i = self.elements.partition_point(|e| e.left <= x);
        (i > 0).then(|| &self.elements[i - 1]).filter(|e| x < e.right)
    }

    pub fn return_time(&self, x: f64) -> Option<usize> {
        self.element_at(x).map(|e| e.r)
    }

    /// `m({R > n}) / m(Delta)`; exact for `n <= horizon`.
    pub fn tail_at(&self, n: usize) -> f64 {
        let returned: f64 = self.elements.iter().filter(|e| e.r <= n).map(Element::mass).sum();
        ((self.ball.mass() - returned) / self.ball.mass()).max(0.0)
    }

    /// Sum of element masses plus the remainder, against `m(Delta)`.
    pub fn mass_accounting_error(&self) -> f64 {
        let sum: f64 = self.elements.iter().map(Element::mass).sum();
        (sum + self.remainder_mass - self.ball.mass()).abs()
    }

    /// Whether the elements are pairwise disjoint and inside `Delta`.
    pub fn is_disjoint(&self) -> bool {
        let tol = 1e-12 * self.ball.mass();
        self.elements.windows(2).all(|w| w[0].right <= w[1].left + tol)
            && self.elements.first().is_none_or(|e| e.left >= self.ball.lo() - tol)
            && self.elements.last().is_none_or(|e| e.right <= self.ball.hi() + tol)
    }

    /// Masses of `{R = j}` for `j <= horizon`.
    pub fn level_masses(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for e in &self.elements {
            if e.r <= self.horizon {
                *out.entry(e.r).or_insert(0.0) += e.mass();
            }
        }
        out
    }

    /// The induced map `F = f^R` on the element containing `x`.
    pub fn induced_map(&self, family: &MapFamily, x: f64) -> Result<Option<f64>> {
        let Some(e) = self.element_at(x) else { return Ok(None) };
        let mut y = x;
        for j in 0..e.r {
            y = family.eval(&self.omega.parameter_at(j as i64), &[y])?[0];
        }
        Ok(Some(y))
    }
}

/// A monotone branch of `f^d` on `[a, b]`, tracked through the orbit `y` of
/// its midpoint `r` and the image offsets `lo <= hi` around `y`.
#[derive(Clone, Copy, Debug)]
struct Piece {
    a: f64,
    b: f64,
    r: f64,
    y: f64,
    lo: f64,
    hi: f64,
}

fn orbit_1d(family: &MapFamily, omega: &Realization, x: f64, d: usize) -> Result<Vec<f64>> {
    let mut xs = Vec::with_capacity(d + 1);
    let mut y = x;
    xs.push(y);
    for j in 0..d {
        y = family.eval(&omega.parameter_at(j as i64), &[y])?[0];
        xs.push(y);
    }
    Ok(xs)
}

fn lifted_diff(family: &MapFamily, target: f64, from: f64) -> f64 {
    if family.space.periodic[0] {
        wrap_centered(target - from)
    } else {
        target - from
    }
}

struct Builder<'a> {
    family: &'a MapFamily,
    omega: &'a Realization,
    ball: ReferenceBall,
    params: &'a GmyParams,
    periodic: bool,
    unimodal: bool,
    elements: Vec<Element>,
    /// Core left end (order key) to element index.
    index: BTreeMap<i64, usize>,
}

fn order_key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    b ^ ((((b >> 63) as u64) >> 1) as i64)
}

#[derive(Clone, Copy, Debug)]
enum Verdict {
    Critical,
    NotHyperbolic,
    NoPreball,
    NoCover,
    Outside,
    Valid(Element, f64),
}

impl<'a> Builder<'a> {
    fn piece(&self, a: f64, b: f64, d: usize) -> Result<Piece> {
        let r = 0.5 * (a + b);
        let xs = orbit_1d(self.family, self.omega, r, d)?;
        let u = push_offset(self.family, &xs, 0, d, a - r)?;
        let v = push_offset(self.family, &xs, 0, d, b - r)?;
        Ok(Piece { a, b, r, y: xs[d], lo: u.min(v), hi: u.max(v) })
    }

    /// Splits `p` (at depth `d`) where its image passes through `y + z`.
    fn split(&self, p: &Piece, d: usize, z: f64) -> Result<Vec<Piece>> {
        let xs = orbit_1d(self.family, self.omega, p.r, d)?;
        let Some(chain) = pullback_offsets(self.family, &xs, z, z)? else {
            return Err(Error::Construction(format!("branch split at depth {d} left the branch of {}", p.r)));
        };
        let s = (p.r + chain[0].0).clamp(p.a, p.b);
        let mut out = Vec::with_capacity(2);
        for (a, b) in [(p.a, s), (s, p.b)] {
            if b > a {
                out.push(self.piece(a, b, d)?);
            }
        }
        Ok(out)
    }

    /// Moves a piece from depth `d` to `d + 1`.
    fn advance(&self, p: Piece, d: usize) -> Result<Vec<Piece>> {
        let mut parts = if self.unimodal && p.y + p.lo < -FOLD_TOL && p.y + p.hi > FOLD_TOL {
            self.split(&p, d, -p.y)?
        } else {
            vec![p]
        };
        let t = self.omega.parameter_at(d as i64);
        for q in parts.iter_mut() {
            let u = self.family.forward_offset_1d(q.y, q.lo)?;
            let v = self.family.forward_offset_1d(q.y, q.hi)?;
            q.y = self.family.eval(&t, &[q.y])?[0];
            q.lo = u.min(v);
            q.hi = u.max(v);
        }
        if self.periodic {
            let mut out = Vec::with_capacity(parts.len());
            for q in parts {
                if q.hi - q.lo > 1.0 {
                    out.extend(self.split(&q, d + 1, 0.5 * (q.lo + q.hi))?);
                } else {
                    out.push(q);
                }
            }
            return Ok(out);
        }
        Ok(parts)
    }

    /// Preimages of `p` under `f^d` inside the piece.
    fn preimages(&self, q: &Piece, d: usize) -> Result<Vec<f64>> {
        let p = self.ball.center;
        let (lo, hi) = (q.y + q.lo, q.y + q.hi);
        let targets: Vec<f64> = if self.periodic {
            let k0 = (lo - p).ceil() as i64;
            let k1 = (hi - p).floor() as i64;
            (k0..=k1).map(|k| p + k as f64).collect()
        } else if lo <= p && p <= hi {
            vec![p]
        } else {
            vec![]
        };
        if targets.is_empty() {
            return Ok(vec![]);
        }
        let xs = orbit_1d(self.family, self.omega, q.r, d)?;
        let mut out = Vec::with_capacity(targets.len());
        for z in targets {
            if let Some(chain) = pullback_offsets(self.family, &xs, z - q.y, z - q.y)? {
                let x = q.r + chain[0].0;
                if x > q.a && x < q.b && !self.in_core(x) {
                    out.push(x);
                }
            }
        }
        Ok(out)
    }

    fn in_core(&self, x: f64) -> bool {
        self.index
            .range(..=order_key(x))
            .next_back()
            .is_some_and(|(_, &i)| x < self.elements[i].right)
    }

    fn inside_core(&self, a: f64, b: f64) -> bool {
        self.index
            .range(..=order_key(a))
            .next_back()
            .is_some_and(|(_, &i)| b <= self.elements[i].right)
    }

    /// Exclusion zone `U^0 ∪ A^k` of element `e` at time `k >= e.n`.
    fn zone(&self, e: &Element, k: usize) -> Result<(f64, f64)> {
        if k <= e.n {
            return Ok(e.u1);
        }
        let rho = self.ball.delta0 * (1.0 + (0.5 * (k - e.n) as f64 * self.params.hyper.log_lambda).exp());
        let xs = orbit_1d(self.family, self.omega, e.center, e.r)?;
        let c = lifted_diff(self.family, self.ball.center, xs[e.r]);
        match pullback_offsets(self.family, &xs, c - rho, c + rho)? {
            Some(ch) => Ok((e.center + ch[0].0, e.center + ch[0].1)),
            None => Ok(e.u1),
        }
    }

    fn excluded(&self, u: (f64, f64), k: usize) -> Result<bool> {
        let tol = 1e-12 * self.ball.mass();
        let mut near: Vec<usize> = Vec::new();
        if let Some((_, &i)) = self.index.range(..=order_key(u.0)).next_back() {
            near.push(i);
        }
        for (_, &i) in self.index.range(order_key(u.0)..) {
            near.push(i);
            if self.elements[i].left >= u.1 {
                break;
            }
        }
        for i in near {
            let z = self.zone(&self.elements[i], k)?;
            if z.0 < u.1 - tol && u.0 + tol < z.1 {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn validate(&self, x: f64, n: usize, m: usize) -> Result<Verdict> {
        let f = self.family;
        let rec = match iterate_record(f, self.omega, &PhasePoint::scalar(x), n + m, self.params.delta) {
            Ok(r) => r,
            Err(Error::CriticalHit(_)) => return Ok(Verdict::Critical),
            Err(e) => return Err(e),
        };
        if !is_hyperbolic_time(&rec.log_inv_norm, &rec.log_trunc_dist, n, &self.params.hyper) {
            return Ok(Verdict::NotHyperbolic);
        }
        let xs: Vec<f64> = rec.points.as_ref().expect("short orbit").iter().map(|p| p[0]).collect();
        let d1 = self.params.delta1;
        if pullback_offsets(f, &xs[..=n], -d1, d1)?.is_none() {
            return Ok(Verdict::NoPreball);
        }
        let d0 = self.ball.delta0;
        let r = n + m;
        let c = lifted_diff(f, self.ball.center, xs[r]);
        // Delta^1 pulled back over the lag must sit inside B(f^n x, delta1')
        let Some(lag) = pullback_offsets(f, &xs[n..=r], c - 2.0 * d0, c + 2.0 * d0)? else {
            return Ok(Verdict::NoCover);
        };
        let dp = self.params.delta1_prime();
        if lag[0].0 < -dp || lag[0].1 > dp {
            return Ok(Verdict::NoCover);
        }
        let mut logd = [0.0f64; 3];
        for j in 0..m {
            let pts = [xs[n + j] + lag[j].0, xs[n + j], xs[n + j] + lag[j].1];
            for (s, y) in logd.iter_mut().zip(pts) {
                *s += f.derivative_1d(y)?.abs().ln();
                if -*s > self.ball.k0.ln() + 1e-9 {
                    return Ok(Verdict::NoCover);
                }
            }
        }
        let Some(u1) = pullback_offsets(f, &xs[..=n], lag[0].0, lag[0].1)? else {
            return Ok(Verdict::NoPreball);
        };
        let u1 = (x + u1[0].0, x + u1[0].1);
        let tol = 1e-12 * self.ball.mass();
        if u1.0 < self.ball.lo() - tol || u1.1 > self.ball.hi() + tol {
            return Ok(Verdict::Outside);
        }
        let Some(core) = pullback_offsets(f, &xs, c - d0, c + d0)? else {
            return Ok(Verdict::NoPreball);
        };
        // derivative of F at both ends and at the centre
        let mut logdf = [0.0f64; 3];
        for j in 0..r {
            let pts = [xs[j] + core[j].0, xs[j], xs[j] + core[j].1];
            for (s, y) in logdf.iter_mut().zip(pts) {
                *s += f.derivative_1d(y)?.abs().ln();
            }
        }
        let images = [c - d0, 0.0, c + d0];
        let kappa = logdf.iter().map(|l| (-l).exp()).fold(0.0, f64::max);
        let mut distortion = 0.0f64;
        for i in 0..3 {
            for k in i + 1..3 {
                let gap = (images[i] - images[k]).abs();
                if gap > 0.0 {
                    distortion = distortion.max((logdf[i] - logdf[k]).abs() / gap);
                }
            }
        }
        let fl = push_offset(f, &xs, 0, r, core[0].0)?;
        let fr = push_offset(f, &xs, 0, r, core[0].1)?;
        let markov = (fl.min(fr) - (c - d0)).abs().max((fl.max(fr) - (c + d0)).abs());
        let (left, right) = (x + core[0].0, x + core[0].1);
        Ok(Verdict::Valid(Element { left, right, u1, center: x, n, m, r, kappa, distortion }, markov))
    }

    fn insert(&mut self, e: Element) {
        self.index.insert(order_key(e.left), self.elements.len());
        self.elements.push(e);
    }
}

/// Builds the partition of `ball` along `omega`, through step `horizon`.
pub fn construct_partition(
    family: &MapFamily,
    omega: &Realization,
    ball: &ReferenceBall,
    horizon: usize,
    params: &GmyParams,
) -> Result<RandomPartition> {
    ball.validate_for(family)?;
    if 2.0 * ball.delta0 > params.delta1_prime() && ball.lag == 0 {
        return invalid("with zero lag, delta1/12 must be at least 2 delta0 for any candidate to cover Delta^1");
    }
    let r0 = params.r0(ball);
    let mut b = Builder {
        family,
        omega,
        ball: *ball,
        params,
        periodic: family.space.periodic[0],
        unimodal: matches!(family.kind, FamilyKind::Unimodal { .. }),
        elements: Vec::new(),
        index: BTreeMap::new(),
    };
    let mut stats = CandidateStats::default();
    let mut markov_defect = 0.0f64;
    let mut pieces = vec![b.piece(ball.lo(), ball.hi(), 0)?];
    let mut buckets: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    let mut done = r0.saturating_sub(1).min(horizon);
    let mut truncated = false;
    let first = r0.max(1);
    for d in 0..=horizon + ball.lag {
        if d > 0 {
            let next: Vec<Result<Vec<Piece>>> = pieces.par_iter().map(|p| b.advance(*p, d - 1)).collect();
            pieces = next.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        }
        if pieces.len() > params.max_pieces {
            warn!("partition construction stopped at step {done}: {} branches exceed the budget", pieces.len());
            truncated = true;
            break;
        }
        if d >= first {
            let found: Vec<Result<Vec<f64>>> = pieces.par_iter().map(|p| b.preimages(p, d)).collect();
            for xs in found {
                for x in xs? {
                    for m in 0..=ball.lag.min(d - first) {
                        let n = d - m;
                        if n <= horizon {
                            buckets.entry(n).or_default().push((x, m));
                        }
                    }
                }
            }
        }
        if d < ball.lag + first {
            continue;
        }
        let n = d - ball.lag;
        if n > horizon {
            break;
        }
        let cands = buckets.remove(&n).unwrap_or_default();
        let mut cands = cands;
        cands.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        let verdicts: Vec<Result<Verdict>> = cands.par_iter().map(|&(x, m)| b.validate(x, n, m)).collect();
        for v in verdicts {
            stats.tested += 1;
            match v? {
                Verdict::Critical => stats.critical += 1,
                Verdict::NotHyperbolic => stats.not_hyperbolic += 1,
                Verdict::NoPreball => stats.no_preball += 1,
                Verdict::NoCover => stats.no_cover += 1,
                Verdict::Outside => stats.outside_ball += 1,
                Verdict::Valid(e, markov) => {
                    if b.excluded(e.u1, n)? {
                        stats.excluded += 1;
                    } else {
                        stats.accepted += 1;
                        markov_defect = markov_defect.max(markov);
                        b.insert(e);
                    }
                }
            }
        }
        pieces.retain(|p| !b.inside_core(p.a, p.b));
        done = n;
        debug!("step {n}: {} candidates, {} elements, {} branches, {stats:?}", cands.len(), b.elements.len(), pieces.len());
    }
    let horizon_done = done;
    let mut elements = b.elements.clone();
    elements.sort_by(|p, q| p.left.total_cmp(&q.left));
    let selected: f64 = elements.iter().map(Element::mass).sum();
    let remainder_mass = (ball.mass() - selected).max(0.0);
    let mut annulus_mass = 0.0;
    for e in &b.elements {
        let z = b.zone(e, horizon_done)?;
        annulus_mass += (z.1 - z.0) - e.mass();
    }
    let annulus_mass = annulus_mass.clamp(0.0, remainder_mass);
    Ok(RandomPartition {
        omega: *omega,
        ball: *ball,
        r0,
        horizon: horizon_done,
        truncated,
        kappa: elements.iter().map(|e| e.kappa).fold(0.0, f64::max),
        distortion: elements.iter().map(|e| e.distortion).fold(0.0, f64::max),
        elements,
        remainder_mass,
        annulus_mass,
        free_mass: remainder_mass - annulus_mass,
        markov_defect,
        stats,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReturnTail {
    pub per_omega: Vec<DecaySeries>,
    pub mean: DecaySeries,
    /// Pointwise maximum over realizations.
    pub envelope: DecaySeries,
}

/// Fit window for return-time tails: every point after the first return.
/// Desk-scale tails stay close to 1, so the usual pre-asymptotic cut does not apply.
pub fn return_tail_window() -> WindowPolicy {
    WindowPolicy { max_value: 1.0 - 1e-9, ..WindowPolicy::default() }
}

/// `m({R_omega > n}) / m(Delta)` per realization on `ns`; points beyond a
/// partition's horizon are censored.
pub fn return_time_tail(partitions: &[RandomPartition], ns: &[u64]) -> Result<ReturnTail> {
    if partitions.is_empty() {
        return invalid("return-time tail needs at least one partition");
    }
    let per_omega: Vec<DecaySeries> = partitions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut s = DecaySeries::new("return_tail", i as i64);
            for &n in ns {
                s.push(n, p.tail_at(n as usize), 0.0, 1, n as usize > p.horizon);
            }
            s
        })
        .collect();
    let mean = DecaySeries::average("return_tail_mean", &per_omega).expect("nonempty");
    let mut envelope = DecaySeries::new("return_tail_envelope", -1);
    for (j, &n) in ns.iter().enumerate() {
        let v = per_omega.iter().map(|s| s.points[j].value).fold(0.0, f64::max);
        let censored = per_omega.iter().any(|s| s.points[j].censored);
        envelope.push(n, v, 0.0, per_omega.len() as u64, censored);
    }
    Ok(ReturnTail { per_omega, mean, envelope })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcdReport {
    /// Return times with positive mass in every partition.
    pub common: Vec<usize>,
    pub gcd: Option<usize>,
    /// `(R, R / q)` for every common value: `{R_bar = k} = {R = q k}`.
    pub rewrite: Vec<(usize, usize)>,
    pub determined: bool,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The gcd of `values` and the rewrite of each value as `q k`.
pub fn gcd_rewrite(values: &[usize]) -> GcdReport {
    let g = values.iter().copied().fold(0, gcd);
    let mut common = values.to_vec();
    common.sort_unstable();
    common.dedup();
    if g == 0 {
        return GcdReport { common, gcd: None, rewrite: vec![], determined: false };
    }
    let rewrite = common.iter().map(|&r| (r, r / g)).collect();
    GcdReport { common, gcd: Some(g), rewrite, determined: true }
}

/// The gcd condition on return times at the partitions' horizons.
pub fn check_gcd_condition(partitions: &[RandomPartition]) -> Result<GcdReport> {
    let Some(first) = partitions.first() else {
        return invalid("gcd check needs at least one partition");
    };
    let mut common: Vec<usize> = first.level_masses().into_iter().filter(|(_, m)| *m > 0.0).map(|(r, _)| r).collect();
    for p in &partitions[1..] {
        let levels = p.level_masses();
        common.retain(|r| levels.get(r).is_some_and(|m| *m > 0.0));
    }
    Ok(gcd_rewrite(&common))
}

fn union_measure(mut iv: Vec<(f64, f64)>) -> f64 {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in iv {
        match cur {
            Some((c0, c1)) if a <= c1 => cur = Some((c0, c1.max(b))),
            Some((c0, c1)) => {
                total += c1 - c0;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((c0, c1)) = cur {
        total += c1 - c0;
    }
    total
}

/// `m({R_a = j} △ {R_b = j})` for `j <= n_hat`.
pub fn level_symmetric_difference(a: &RandomPartition, b: &RandomPartition, n_hat: usize) -> Vec<(usize, f64)> {
    (1..=n_hat)
        .map(|j| {
            let ia: Vec<(f64, f64)> = a.elements.iter().filter(|e| e.r == j).map(|e| (e.left, e.right)).collect();
            let ib: Vec<(f64, f64)> = b.elements.iter().filter(|e| e.r == j).map(|e| (e.left, e.right)).collect();
            let ma: f64 = ia.iter().map(|(l, r)| r - l).sum();
            let mb: f64 = ib.iter().map(|(l, r)| r - l).sum();
            let both = ia.iter().chain(&ib).copied().collect();
            let union = union_measure(both);
            (j, (2.0 * union - ma - mb).max(0.0))
        })
        .collect()
}

/// Search grid for [`find_reference_ball`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallSearch {
    pub centers: Vec<f64>,
    pub radii: Vec<f64>,
    pub max_lag: usize,
    pub k0: f64,
    /// Pre-balls probed per realization.
    pub samples: usize,
    /// Hyperbolic times are looked for up to this time.
    pub probe_horizon: usize,
    /// Required covering fraction in every probe realization (0 asks for one cover).
    pub coverage: f64,
}

/// Images `f^j(B(f^n x, delta1'))`, `j <= max_lag`, while injective, off the
/// critical point and within the `K0` bound; `None` entries end the sequence.
fn lag_images(family: &MapFamily, omega: &Realization, xs: &[f64], n: usize, radius: f64, k0: f64) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let (mut lo, mut hi) = (-radius, radius);
    let mut logd = [0.0f64; 3];
    let lk0 = k0.ln() + 1e-9;
    for j in 0..xs.len() - n {
        let y = xs[n + j];
        let (a, b) = (y + lo, y + hi);
        if family.critical.is_some() && a <= 0.0 && b >= 0.0 {
            break;
        }
        if hi - lo >= 1.0 && family.space.periodic[0] {
            break;
        }
        if logd.iter().any(|&s| -s > lk0) {
            break;
        }
        out.push((a, b));
        if n + j + 1 >= xs.len() {
            break;
        }
        for (s, z) in logd.iter_mut().zip([a, y, b]) {
            *s += family.derivative_1d(z)?.abs().ln();
        }
        let u = family.forward_offset_1d(y, lo)?;
        let v = family.forward_offset_1d(y, hi)?;
        lo = u.min(v);
        hi = u.max(v);
    }
    let _ = omega;
    Ok(out)
}

/// First `(delta0, N0, p)` in search order (radii as given, lag ascending,
/// centres as given) such that in every probe realization some probed
/// pre-ball has a lagged image covering `Delta^1`, and at least a `coverage`
/// fraction of them do.
pub fn find_reference_ball(
    family: &MapFamily,
    probes: &[Realization],
    params: &GmyParams,
    search: &BallSearch,
) -> Result<ReferenceBall> {
    if !family.is_one_dimensional() {
        return Err(Error::Unsupported("reference balls are searched for 1-D families only".into()));
    }
    if probes.is_empty() || search.samples == 0 {
        return invalid("reference-ball search needs probe realizations and samples");
    }
    let radius = params.delta1_prime();
    let per_probe: Vec<Vec<Vec<(f64, f64)>>> = probes
        .par_iter()
        .map(|w| -> Result<Vec<Vec<(f64, f64)>>> {
            let mut balls = Vec::new();
            for i in 0..search.samples {
                let x = sample_point(family, w, tag("reference_ball"), i as u64);
                let rec = match iterate_record(family, w, &x, search.probe_horizon + search.max_lag, params.delta) {
                    Ok(r) => r,
                    Err(Error::CriticalHit(_)) => continue,
                    Err(e) => return Err(e),
                };
                let xs: Vec<f64> = rec.points.as_ref().expect("short orbit").iter().map(|p| p[0]).collect();
                let n = (1..=search.probe_horizon)
                    .rev()
                    .find(|&n| is_hyperbolic_time(&rec.log_inv_norm, &rec.log_trunc_dist, n, &params.hyper));
                let Some(n) = n else { continue };
                if pullback_offsets(family, &xs[..=n], -params.delta1, params.delta1)?.is_none() {
                    continue;
                }
                balls.push(lag_images(family, w, &xs[..=n + search.max_lag], n, radius, search.k0)?);
            }
            Ok(balls)
        })
        .collect::<Result<_>>()?;
    if per_probe.iter().any(|b| b.is_empty()) {
        return Err(Error::Construction("some probe realization produced no hyperbolic pre-ball".into()));
    }
    let periodic = family.space.periodic[0];
    let covers = |img: &(f64, f64), lo: f64, hi: f64| {
        let shifts = if periodic { -2..=2 } else { 0..=0 };
        shifts.into_iter().any(|k| img.0 <= lo + k as f64 && img.1 >= hi + k as f64)
    };
    let mut best: Option<(f64, ReferenceBall)> = None;
    for &d0 in &search.radii {
        for lag in 0..=search.max_lag {
            for &p in &search.centers {
                let Ok(ball) = ReferenceBall::new(p, d0, lag, search.k0) else { continue };
                if ball.validate_for(family).is_err() {
                    continue;
                }
                let (lo, hi) = (p - 2.0 * d0, p + 2.0 * d0);
                let mut worst = 1.0f64;
                let mut every = true;
                for balls in &per_probe {
                    let hit = balls.iter().filter(|imgs| imgs.iter().take(lag + 1).any(|g| covers(g, lo, hi))).count();
                    every &= hit > 0;
                    worst = worst.min(hit as f64 / balls.len() as f64);
                }
                if every && worst >= search.coverage {
                    return Ok(ReferenceBall { coverage: worst, ..ball });
                }
                if best.is_none_or(|(c, _)| worst > c) {
                    best = Some((worst, ball));
                }
            }
        }
    }
    let best = best.map_or("no admissible ball".to_string(), |(c, b)| {
        format!("best was p = {}, delta0 = {}, N0 = {} at {:.1}%", b.center, b.delta0, b.lag, 100.0 * c)
    });
    Err(Error::Construction(format!(
        "no reference ball on the search grid is covered in every probe realization (at {:.0}% of pre-balls) within lag {}; {best}",
        100.0 * search.coverage,
        search.max_lag
    )))
}
