//! Concrete map families `f_t`, their derivatives and critical-set geometry.
//!
//! All families use the additive perturbation model `f_t = f + t`, so the
//! Jacobian never depends on the noise parameter.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{invalid, Error, Result};

/// Coordinates of a point of `M`. Circle coordinates live in `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhasePoint(pub SmallVec<[f64; 4]>);

impl PhasePoint {
    pub fn new(coords: &[f64]) -> Self {
        Self(SmallVec::from_slice(coords))
    }

    pub fn scalar(x: f64) -> Self {
        Self(smallvec![x])
    }
}

impl Deref for PhasePoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for PhasePoint {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl fmt::Display for PhasePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Reduces a circle coordinate to `[0, 1)`.
#[inline]
pub fn wrap01(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of a circle displacement in `[-1/2, 1/2)`.
#[inline]
pub fn wrap_centered(d: f64) -> f64 {
    d - (d + 0.5).floor()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Interval,
    Cylinder,
    Torus,
}

/// Phase space `M`: an interval, the cylinder `S^1 x I`, or a torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpace {
    pub kind: SpaceKind,
    pub bounds: Vec<(f64, f64)>,
    pub periodic: Vec<bool>,
}

impl PhaseSpace {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return invalid(format!("interval bounds must satisfy L < R, got [{lo}, {hi}]"));
        }
        Ok(Self { kind: SpaceKind::Interval, bounds: vec![(lo, hi)], periodic: vec![false] })
    }

    pub fn cylinder(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return invalid(format!("cylinder bounds must satisfy L < R, got [{lo}, {hi}]"));
        }
        Ok(Self {
            kind: SpaceKind::Cylinder,
            bounds: vec![(0.0, 1.0), (lo, hi)],
            periodic: vec![true, false],
        })
    }

    pub fn torus(dim: usize) -> Result<Self> {
        if dim == 0 {
            return invalid("torus dimension must be positive");
        }
        Ok(Self { kind: SpaceKind::Torus, bounds: vec![(0.0, 1.0); dim], periodic: vec![true; dim] })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.bounds).zip(&self.periodic).all(|((&c, &(a, b)), &p)| {
                if p {
                    (0.0..1.0).contains(&c)
                } else {
                    a <= c && c <= b
                }
            })
    }

    /// Riemannian distance (flat metric, circle axes wrapped).
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .zip(&self.periodic)
            .map(|((a, b), &p)| {
                let d = if p { wrap_centered(a - b) } else { a - b };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Point with coordinates given as fractions of each axis.
    pub fn from_unit(&self, u: &[f64]) -> PhasePoint {
        PhasePoint(
            u.iter()
                .zip(&self.bounds)
                .zip(&self.periodic)
                .map(|((&v, &(a, b)), &p)| if p { wrap01(v) } else { a + (b - a) * v })
                .collect(),
        )
    }
}

/// Square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    n: usize,
    data: SmallVec<[f64; 16]>,
}

impl Jacobian {
    pub fn from_rows(n: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), n * n, "jacobian data has wrong length");
        Self { n, data: SmallVec::from_slice(data) }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data: SmallVec<[f64; 16]> = smallvec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            data[i * n + i] = *d;
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mul(&self, other: &Jacobian) -> Jacobian {
        let n = self.n;
        let mut data: SmallVec<[f64; 16]> = smallvec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        Jacobian { n, data }
    }

    pub fn apply(&self, v: &[f64]) -> SmallVec<[f64; 4]> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum()).collect()
    }

    pub fn det(&self) -> f64 {
        match self.n {
            1 => self.data[0],
            2 => self.data[0] * self.data[3] - self.data[1] * self.data[2],
            _ => {
                if self.is_diagonal() {
                    return (0..self.n).map(|i| self.get(i, i)).product();
                }
                let (lu, sign) = match self.lu() {
                    Some(v) => v,
                    None => return 0.0,
                };
                sign * (0..self.n).map(|i| lu[i * self.n + i]).product::<f64>()
            }
        }
    }

    fn is_diagonal(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| i == j || self.get(i, j) == 0.0))
    }

    fn lu(&self) -> Option<(SmallVec<[f64; 16]>, f64)> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut sign = 1.0;
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))?;
            if a[p * n + k] == 0.0 {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                sign = -sign;
            }
            for i in k + 1..n {
                let f = a[i * n + k] / a[k * n + k];
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
        Some((a, sign))
    }

    pub fn inverse(&self) -> Option<Jacobian> {
        let n = self.n;
        match n {
            1 => (self.data[0] != 0.0).then(|| Jacobian::from_rows(1, &[1.0 / self.data[0]])),
            2 => {
                let d = self.det();
                if d == 0.0 || !d.is_finite() {
                    return None;
                }
                let [a, b, c, e] = [self.data[0], self.data[1], self.data[2], self.data[3]];
                Some(Jacobian::from_rows(2, &[e / d, -b / d, -c / d, a / d]))
            }
            _ => {
                // Gauss-Jordan with partial pivoting
                let mut a = self.data.clone();
                let mut inv = Jacobian::diagonal(&vec![1.0; n]).data;
                for k in 0..n {
                    let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))?;
                    if a[p * n + k] == 0.0 {
                        return None;
                    }
                    for j in 0..n {
                        a.swap(k * n + j, p * n + j);
                        inv.swap(k * n + j, p * n + j);
                    }
                    let piv = a[k * n + k];
                    for j in 0..n {
                        a[k * n + j] /= piv;
                        inv[k * n + j] /= piv;
                    }
                    for i in 0..n {
                        if i != k {
                            let f = a[i * n + k];
                            for j in 0..n {
                                a[i * n + j] -= f * a[k * n + j];
                                inv[i * n + j] -= f * inv[k * n + j];
                            }
                        }
                    }
                }
                Some(Jacobian { n, data: inv })
            }
        }
    }

    /// Largest and smallest singular values.
    pub fn singular_extremes(&self) -> (f64, f64) {
        match self.n {
            1 => (self.data[0].abs(), self.data[0].abs()),
            2 => {
                let f: f64 = self.data.iter().map(|v| v * v).sum();
                let d = self.det().abs();
                let disc = (f * f - 4.0 * d * d).max(0.0).sqrt();
                let smax = ((f + disc) / 2.0).sqrt();
                let smin = if smax > 0.0 { d / smax } else { 0.0 };
                (smax, smin)
            }
            _ => {
                let smax = self.power_norm();
                let smin = match self.inverse() {
                    Some(inv) => 1.0 / inv.power_norm(),
                    None => 0.0,
                };
                (smax, smin)
            }
        }
    }

    /// Operator norm by power iteration on `A^T A` (64 iterations, 1e-12).
    fn power_norm(&self) -> f64 {
        let n = self.n;
        let mut v: SmallVec<[f64; 4]> = smallvec![1.0 / (n as f64).sqrt(); n];
        let mut est = 0.0;
        for _ in 0..64 {
            let av = self.apply(&v);
            let mut w: SmallVec<[f64; 4]> = smallvec![0.0; n];
            for j in 0..n {
                w[j] = (0..n).map(|i| self.get(i, j) * av[i]).sum();
            }
            let norm = w.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm.sqrt();
            for c in w.iter_mut() {
                *c /= norm;
            }
            v = w;
            if (next - est).abs() <= 1e-12 * next {
                return next;
            }
            est = next;
        }
        est
    }

    /// `||A^{-1}||`, infinite for singular matrices.
    pub fn inverse_norm(&self) -> f64 {
        let (_, smin) = self.singular_extremes();
        if smin > 0.0 {
            1.0 / smin
        } else {
            f64::INFINITY
        }
    }
}

/// Non-degenerate critical set constants `(B, beta)` and the hyperbolic-time exponent `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub b_const: f64,
    pub beta: f64,
    pub b: f64,
}

impl CriticalSet {
    pub fn new(b_const: f64, beta: f64, b: Option<f64>) -> Result<Self> {
        if !(b_const > 1.0) || !(beta > 0.0) {
            return invalid(format!("critical set needs B > 1 and beta > 0, got B={b_const}, beta={beta}"));
        }
        let cap = 1.0f64.min(1.0 / beta);
        let b = b.unwrap_or(0.49 * cap);
        if !(b > 0.0 && 2.0 * b < cap) {
            return invalid(format!("need 0 < 2b < min(1, 1/beta) = {cap}, got b={b}"));
        }
        Ok(Self { b_const, beta, b })
    }
}

/// Truncated distance: `dist` if `dist < delta`, otherwise 1 (ties go to 1).
#[inline]
pub fn dist_delta(dist: f64, delta: f64) -> f64 {
    if dist < delta {
        dist
    } else {
        1.0
    }
}

/// Parameter of the quadratic family whose critical point lands on the
/// positive fixed point after three steps.
pub fn misiurewicz_parameter() -> f64 {
    let gap = |a: f64| {
        let f2 = a - a * a;
        let f3 = a - f2 * f2;
        f3 - (-1.0 + (1.0 + 4.0 * a).sqrt()) / 2.0
    };
    let (mut lo, mut hi) = (1.5, 1.6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyKind {
    /// `x -> 2x + t mod 1`.
    Doubling,
    /// `(2x_1, ..., 2x_{d-1}, g(x_d)) + t mod 1` with `g` an intermittent
    /// degree-2 circle map, neutral at 0.
    TorusNue { dim: usize, intermittency: f64 },
    /// `(d s mod 1, p0 + alpha sin(2 pi s) - x^2 + t)`.
    Viana { expansion: u32, amplitude: f64, p0: f64 },
    /// `x -> a - x^2 + t`.
    Unimodal { a: f64 },
}

/// A map family `t -> f_t` on a phase space, with optional critical set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFamily {
    pub kind: FamilyKind,
    pub space: PhaseSpace,
    pub critical: Option<CriticalSet>,
}

impl MapFamily {
    pub fn doubling() -> Self {
        Self { kind: FamilyKind::Doubling, space: PhaseSpace::torus(1).unwrap(), critical: None }
    }

    pub fn torus_nue(dim: usize, intermittency: f64) -> Result<Self> {
        if dim < 2 {
            return invalid("torus_nue needs dimension >= 2");
        }
        if !(intermittency > 0.0 && intermittency < 1.0) {
            return invalid(format!("intermittency exponent must lie in (0, 1), got {intermittency}"));
        }
        Ok(Self {
            kind: FamilyKind::TorusNue { dim, intermittency },
            space: PhaseSpace::torus(dim)?,
            critical: None,
        })
    }

    /// Viana map; the vertical interval is sized so that `f_t` maps the
    /// cylinder into its interior for every `|t| <= epsilon`.
    pub fn viana(expansion: u32, amplitude: f64, p0: f64, epsilon: f64) -> Result<Self> {
        if expansion < 2 {
            return invalid("viana expansion factor must be >= 2");
        }
        let top = p0 + amplitude.abs() + epsilon;
        let floor = p0 - amplitude.abs() - epsilon;
        let l = trapping_half_width(top, floor)
            .ok_or_else(|| Error::InvalidParameter(format!(
                "viana map with p0={p0}, alpha={amplitude}, eps={epsilon} has no invariant cylinder"
            )))?;
        let b_const = (2.0 * PI * amplitude.abs() + expansion as f64 + 2.0 * l) * l + 4.0;
        Ok(Self {
            kind: FamilyKind::Viana { expansion, amplitude, p0 },
            space: PhaseSpace::cylinder(-l, l)?,
            critical: Some(CriticalSet::new(b_const, 1.0, None)?),
        })
    }

    /// Quadratic map `a - x^2`, on an interval trapping all `|t| <= epsilon`.
    pub fn unimodal(a: f64, epsilon: f64) -> Result<Self> {
        let l = trapping_half_width(a + epsilon, a - epsilon).ok_or_else(|| {
            Error::InvalidParameter(format!("quadratic map a={a}, eps={epsilon} has no trapping interval"))
        })?;
        Ok(Self {
            kind: FamilyKind::Unimodal { a },
            space: PhaseSpace::interval(-l, l)?,
            critical: Some(CriticalSet::new((2.0 * l * l).max(2.0) + 1.0, 1.0, None)?),
        })
    }

    pub fn family_id(&self) -> &'static str {
        match self.kind {
            FamilyKind::Doubling => "doubling",
            FamilyKind::TorusNue { .. } => "torus_nue",
            FamilyKind::Viana { .. } => "viana",
            FamilyKind::Unimodal { .. } => "unimodal",
        }
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Dimension of the noise parameter `t`.
    pub fn noise_dim(&self) -> usize {
        match self.kind {
            FamilyKind::TorusNue { dim, .. } => dim,
            _ => 1,
        }
    }

    pub fn is_one_dimensional(&self) -> bool {
        self.dim() == 1
    }

    /// Replaces `b` in the critical set (validated against beta).
    pub fn with_b(mut self, b: f64) -> Result<Self> {
        if let Some(c) = self.critical {
            self.critical = Some(CriticalSet::new(c.b_const, c.beta, Some(b))?);
        }
        Ok(self)
    }

    /// `dist(x, C)`, `None` when the critical set is empty.
    pub fn dist_to_critical(&self, x: &[f64]) -> Option<f64> {
        match self.kind {
            FamilyKind::Unimodal { .. } => Some(x[0].abs()),
            FamilyKind::Viana { .. } => Some(x[1].abs()),
            _ => None,
        }
    }

    /// `f_t(x)`.
    pub fn eval(&self, t: &[f64], x: &[f64]) -> Result<PhasePoint> {
        if t.len() != self.noise_dim() {
            return invalid(format!("{} expects a {}-dimensional noise parameter", self.family_id(), self.noise_dim()));
        }
        let out = match self.kind {
            FamilyKind::Doubling => PhasePoint::scalar(wrap01(2.0 * x[0] + t[0])),
            FamilyKind::TorusNue { dim, intermittency } => {
                let mut p: SmallVec<[f64; 4]> = SmallVec::with_capacity(dim);
                for i in 0..dim - 1 {
                    p.push(wrap01(2.0 * x[i] + t[i]));
                }
                p.push(wrap01(intermittent(x[dim - 1], intermittency) + t[dim - 1]));
                PhasePoint(p)
            }
            FamilyKind::Viana { expansion, amplitude, p0 } => {
                let s = x[0];
                let s1 = wrap01(expansion as f64 * s);
                let v = p0 + amplitude * (2.0 * PI * s).sin() - x[1] * x[1] + t[0];
                PhasePoint(smallvec![s1, v])
            }
            FamilyKind::Unimodal { a } => PhasePoint::scalar(a - x[0] * x[0] + t[0]),
        };
        if !self.space.contains(&out) {
            return Err(Error::DomainEscape {
                step: 0,
                detail: format!("{} maps {} to {} outside the phase space", self.family_id(), fmt_slice(x), out),
            });
        }
        Ok(out)
    }

    /// `Df(x)`; identical for every noise parameter.
    pub fn jacobian(&self, x: &[f64]) -> Result<Jacobian> {
        let jac = match self.kind {
            FamilyKind::Doubling => Jacobian::from_rows(1, &[2.0]),
            FamilyKind::TorusNue { dim, intermittency } => {
                let mut diag = vec![2.0; dim];
                diag[dim - 1] = intermittent_derivative(x[dim - 1], intermittency);
                Jacobian::diagonal(&diag)
            }
            FamilyKind::Viana { expansion, amplitude, .. } => {
                let c = 2.0 * PI * amplitude * (2.0 * PI * x[0]).cos();
                Jacobian::from_rows(2, &[expansion as f64, 0.0, c, -2.0 * x[1]])
            }
            FamilyKind::Unimodal { .. } => Jacobian::from_rows(1, &[-2.0 * x[0]]),
        };
        if let Some(0.0) = self.dist_to_critical(x) {
            return Err(Error::CriticalHit(fmt_slice(x)));
        }
        Ok(jac)
    }

    /// `||Df_t(x)^{-1}||`.
    pub fn jacobian_inverse_norm(&self, _t: &[f64], x: &[f64]) -> Result<f64> {
        match self.kind {
            FamilyKind::Doubling => Ok(0.5),
            FamilyKind::Unimodal { .. } => {
                if x[0] == 0.0 {
                    return Err(Error::CriticalHit(fmt_slice(x)));
                }
                Ok(1.0 / (2.0 * x[0].abs()))
            }
            FamilyKind::TorusNue { dim, intermittency } => {
                Ok(0.5f64.max(1.0 / intermittent_derivative(x[dim - 1], intermittency)))
            }
            FamilyKind::Viana { .. } => {
                let n = self.jacobian(x)?.inverse_norm();
                if n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::SingularJacobian(fmt_slice(x)))
                }
            }
        }
    }

    /// `log |det Df(x)|`.
    pub fn log_abs_det(&self, x: &[f64]) -> Result<f64> {
        let d = self.jacobian(x)?.det().abs();
        if d == 0.0 {
            return Err(Error::SingularJacobian(fmt_slice(x)));
        }
        Ok(d.ln())
    }

    /// Derivative of a 1-D family.
    pub fn derivative_1d(&self, x: f64) -> Result<f64> {
        match self.kind {
            FamilyKind::Doubling => Ok(2.0),
            FamilyKind::Unimodal { .. } => Ok(-2.0 * x),
            _ => Err(Error::Unsupported(format!("{} is not one-dimensional", self.family_id()))),
        }
    }

    /// Inverse branch in offset form: returns `dy` with
    /// `f_t(x_ref + dy) = f_t(x_ref) + dz` on the monotone branch through `x_ref`,
    /// or `None` if `f_t(x_ref) + dz` is not covered by that branch.
    pub fn inverse_offset_1d(&self, x_ref: f64, dz: f64) -> Result<Option<f64>> {
        match self.kind {
            FamilyKind::Doubling => Ok(Some(dz / 2.0)),
            FamilyKind::Unimodal { .. } => {
                let y2 = x_ref * x_ref - dz;
                if !(y2 > 0.0) || x_ref == 0.0 {
                    return Ok(None);
                }
                let y = x_ref.signum() * y2.sqrt();
                Ok(Some(-dz / (y + x_ref)))
            }
            _ => Err(Error::Unsupported(format!("{} has no 1-D inverse branch", self.family_id()))),
        }
    }

    /// Forward map in offset form: `f_t(x_ref + dy) - f_t(x_ref)`, lifted.
    pub fn forward_offset_1d(&self, x_ref: f64, dy: f64) -> Result<f64> {
        match self.kind {
            FamilyKind::Doubling => Ok(2.0 * dy),
            FamilyKind::Unimodal { .. } => Ok(-dy * (2.0 * x_ref + dy)),
            _ => Err(Error::Unsupported(format!("{} is not one-dimensional", self.family_id()))),
        }
    }

    /// Newton solve of `f_t(y) = z` starting from `guess`, for any family.
    pub fn local_inverse(&self, t: &[f64], z: &[f64], guess: &[f64]) -> Result<PhasePoint> {
        let mut y = PhasePoint::new(guess);
        for _ in 0..50 {
            let fy = self.eval(t, &y).or_else(|_| self.eval_unchecked(t, &y))?;
            let r: SmallVec<[f64; 4]> = fy
                .iter()
                .zip(z)
                .zip(&self.space.periodic)
                .map(|((a, b), &p)| if p { wrap_centered(a - b) } else { a - b })
                .collect();
            let err = r.iter().map(|c| c.abs()).fold(0.0, f64::max);
            if err < 1e-14 {
                return Ok(self.reduce(y));
            }
            let inv = self.jacobian(&y)?.inverse().ok_or_else(|| Error::SingularJacobian(y.to_string()))?;
            let step = inv.apply(&r);
            for (c, s) in y.iter_mut().zip(step) {
                *c -= s;
            }
        }
        Err(Error::Construction(format!("local inverse did not converge near {}", fmt_slice(guess))))
    }

    fn eval_unchecked(&self, t: &[f64], x: &[f64]) -> Result<PhasePoint> {
        let x = self.reduce(PhasePoint::new(x));
        match self.kind {
            FamilyKind::Unimodal { a } => Ok(PhasePoint::scalar(a - x[0] * x[0] + t[0])),
            FamilyKind::Viana { expansion, amplitude, p0 } => Ok(PhasePoint(smallvec![
                wrap01(expansion as f64 * x[0]),
                p0 + amplitude * (2.0 * PI * x[0]).sin() - x[1] * x[1] + t[0]
            ])),
            _ => self.eval(t, &x),
        }
    }

    fn reduce(&self, mut y: PhasePoint) -> PhasePoint {
        for (c, &p) in y.iter_mut().zip(&self.space.periodic) {
            if p {
                *c = wrap01(*c);
            }
        }
        y
    }
}

fn trapping_half_width(top: f64, floor: f64) -> Option<f64> {
    // need top < L and floor - L^2 > -L
    let disc = 1.0 + 4.0 * floor;
    if disc <= 0.0 {
        return None;
    }
    let hi = (1.0 + disc.sqrt()) / 2.0;
    let lo = top.max(0.0);
    (lo < hi).then(|| 0.5 * (lo + hi))
}

/// Degree-2 circle map, neutral at 0: `g(c) = c + 2^a c |c|^a` on `[-1/2, 1/2)`.
#[inline]
pub fn intermittent(x: f64, a: f64) -> f64 {
    let c = if x < 0.5 { x } else { x - 1.0 };
    c + 2f64.powf(a) * c * c.abs().powf(a)
}

#[inline]
pub fn intermittent_derivative(x: f64, a: f64) -> f64 {
    let c = if x < 0.5 { x } else { x - 1.0 };
    1.0 + (1.0 + a) * 2f64.powf(a) * c.abs().powf(a)
}

fn fmt_slice(x: &[f64]) -> String {
    PhasePoint::new(x).to_string()
}

/// Sampling grid for [`check_nondegeneracy`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    /// Distances to the critical set are `10^{-k}` for `k` in `1..=decades`.
    pub decades: u32,
    /// Points per decade (spread along the critical set and in magnitude).
    pub points_per_decade: usize,
    /// Candidate exponents, tried in increasing order.
    pub betas: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { decades: 8, points_per_decade: 24, betas: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    /// Smallest `B` satisfying (c1)-(c3) on the grid.
    pub b_required: f64,
    /// Requirement restricted to each distance band: a uniform sweep of the
    /// space first, then the decades `10^{-k}` inward.
    pub per_decade: Vec<f64>,
    pub fits: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub applicable: bool,
    pub beta: Option<f64>,
    pub b_const: Option<f64>,
    pub rows: Vec<BetaRow>,
    /// Grid points skipped because they lie on the critical set.
    pub skipped: Vec<PhasePoint>,
}

/// Sweeps a grid approaching the critical set and finds the smallest exponent
/// `beta` for which the required `B` stays bounded (growth factor below 1.5
/// from the outer decades to the two innermost ones).
pub fn check_nondegeneracy(family: &MapFamily, grid: &GridSpec) -> Result<NondegeneracyReport> {
    if family.critical.is_none() {
        return Ok(NondegeneracyReport { applicable: false, beta: None, b_const: None, rows: vec![], skipped: vec![] });
    }
    if grid.decades < 3 || grid.points_per_decade == 0 {
        return invalid("nondegeneracy grid needs >= 3 decades and >= 1 point per decade");
    }
    let dim = family.dim();
    let crit_axis = dim - 1;
    let mut skipped = Vec::new();
    // (decade, x, pair partners)
    let mut samples: Vec<(usize, PhasePoint)> = Vec::new();
    for k in 1..=grid.decades {
        for i in 0..grid.points_per_decade {
            let frac = (i as f64 + 0.5) / grid.points_per_decade as f64;
            let d = 10f64.powf(-(k as f64) + frac);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let mut x = PhasePoint(smallvec![0.0; dim]);
            if dim == 2 {
                x[0] = wrap01(0.618_033_988_749_894_9 * (i as f64 + k as f64 * 7.0));
            }
            x[crit_axis] = sign * d;
            samples.push((k as usize, x));
        }
    }
    // outermost band: a uniform sweep across the whole space
    let (lo, hi) = family.space.bounds[crit_axis];
    for i in 0..grid.points_per_decade {
        let mut x = PhasePoint(smallvec![0.0; dim]);
        if dim == 2 {
            x[0] = wrap01(0.381_966_011_250_105_1 * i as f64);
        }
        x[crit_axis] = lo + (hi - lo) * (i as f64 + 0.5) / grid.points_per_decade as f64;
        samples.push((0, x));
    }
    let zero = PhasePoint(smallvec![0.0; dim]);
    skipped.push(zero);

    // per sample: (decade, dist, sigma_max, sigma_min, [(pair dist, dlog_inv_norm, dlog_det)])
    struct Obs {
        decade: usize,
        dist: f64,
        smax: f64,
        smin: f64,
        pairs: Vec<(f64, f64, f64)>,
    }
    let mut obs = Vec::with_capacity(samples.len());
    for (decade, x) in samples {
        let dist = family.dist_to_critical(&x).unwrap();
        if dist == 0.0 {
            skipped.push(x);
            continue;
        }
        let jac = family.jacobian(&x)?;
        let (smax, smin) = jac.singular_extremes();
        let lin = jac.inverse_norm().ln();
        let ldet = jac.det().abs().ln();
        let mut pairs = Vec::new();
        for &r in &[0.05, 0.2, 0.45] {
            for dir in 0..(2 * dim) {
                let mut y = x.clone();
                let ax = dir / 2;
                let s = if dir % 2 == 0 { 1.0 } else { -1.0 };
                y[ax] += s * r * dist;
                if family.space.periodic[ax] {
                    y[ax] = wrap01(y[ax]);
                }
                let dy = family.dist_to_critical(&y).unwrap();
                if dy == 0.0 || !family.space.contains(&y) {
                    continue;
                }
                let jy = family.jacobian(&y)?;
                let pd = family.space.distance(&x, &y);
                pairs.push((pd, (lin - jy.inverse_norm().ln()).abs(), (ldet - jy.det().abs().ln()).abs()));
            }
        }
        obs.push(Obs { decade, dist, smax, smin, pairs });
    }

    let decades = grid.decades as usize + 1;
    let mut rows = Vec::new();
    for &beta in &grid.betas {
        let mut per_decade = vec![1.0f64; decades];
        for o in &obs {
            let db = o.dist.powf(beta);
            let mut need = (db / o.smin).max(o.smax * db);
            for &(pd, dl, dd) in &o.pairs {
                need = need.max(dl * db / pd).max(dd * db / pd);
            }
            per_decade[o.decade] = per_decade[o.decade].max(need);
        }
        let outer = per_decade[..decades - 2].iter().cloned().fold(1.0, f64::max);
        let inner = per_decade[decades - 2..].iter().cloned().fold(1.0, f64::max);
        let b_required = per_decade.iter().cloned().fold(1.0, f64::max) * (1.0 + 1e-9);
        rows.push(BetaRow { beta, b_required, per_decade, fits: inner <= 1.5 * outer });
    }
    let best = rows.iter().find(|r| r.fits);
    Ok(NondegeneracyReport {
        applicable: true,
        beta: best.map(|r| r.beta),
        b_const: best.map(|r| r.b_required),
        rows: rows.clone(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_examples() {
        let f = MapFamily::doubling();
        assert_eq!(f.eval(&[0.0], &[0.3]).unwrap()[0], 0.6);
        assert_eq!(f.jacobian_inverse_norm(&[0.0], &[0.77]).unwrap(), 0.5);
    }

    #[test]
    fn unimodal_examples() {
        let a = misiurewicz_parameter();
        let f = MapFamily::unimodal(a, 1e-3).unwrap();
        assert_eq!(f.eval(&[0.001], &[0.0]).unwrap()[0], a + 0.001);
        assert_eq!(f.jacobian_inverse_norm(&[0.0], &[0.5]).unwrap(), 1.0);
        assert!(matches!(f.jacobian_inverse_norm(&[0.0], &[0.0]), Err(Error::CriticalHit(_))));
    }

    #[test]
    fn viana_vertical_image() {
        let f = MapFamily::viana(16, 0.01, misiurewicz_parameter(), 1e-3).unwrap();
        let s = 0.123;
        let y = f.eval(&[0.0], &[s, 0.0]).unwrap();
        assert_eq!(y[0], wrap01(16.0 * s));
        assert_eq!(y[1], misiurewicz_parameter() + 0.01 * (2.0 * PI * s).sin());
    }

    #[test]
    fn dist_delta_branches() {
        assert_eq!(dist_delta(0.2, 0.1), 1.0);
        assert_eq!(dist_delta(0.05, 0.1), 0.05);
        assert_eq!(dist_delta(0.1, 0.1), 1.0);
    }

    #[test]
    fn intermittent_map_is_degree_two_and_c1() {
        let a = 0.5;
        assert!((intermittent(0.5 - 1e-12, a) - 1.0).abs() < 1e-9);
        assert!((intermittent(0.5, a) + 1.0).abs() < 1e-12);
        let left = intermittent_derivative(0.5 - 1e-15, a);
        let right = intermittent_derivative(0.5, a);
        assert!((left - right).abs() < 1e-9);
        assert!((right - (2.0 + a)).abs() < 1e-12);
        assert_eq!(intermittent_derivative(0.0, a), 1.0);
    }

    #[test]
    fn viana_interval_is_trapping() {
        let f = MapFamily::viana(16, 0.01, misiurewicz_parameter(), 1e-3).unwrap();
        let (lo, hi) = f.space.bounds[1];
        assert!(lo < 0.0 && hi > 1.56);
        for t in [-1e-3, 1e-3] {
            for i in 0..200 {
                let s = i as f64 / 200.0;
                for x in [lo, 0.0, hi] {
                    assert!(f.eval(&[t], &[s, x]).is_ok());
                }
            }
        }
    }

    #[test]
    fn misiurewicz_orbit_lands_on_fixed_point() {
        let a = misiurewicz_parameter();
        let p = (-1.0 + (1.0 + 4.0 * a).sqrt()) / 2.0;
        let mut x = 0.0;
        for _ in 0..3 {
            x = a - x * x;
        }
        assert!((x - p).abs() < 1e-12);
        assert!((a - 1.543_689_012_692_076).abs() < 1e-12);
    }

    #[test]
    fn matrix_helpers() {
        let m = Jacobian::from_rows(3, &[2.0, 1.0, 0.0, 0.0, 3.0, 1.0, 1.0, 0.0, 4.0]);
        let inv = m.inverse().unwrap();
        let id = m.mul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                assert!((id.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!((m.det() - 25.0).abs() < 1e-12);
        let (smax, smin) = Jacobian::diagonal(&[2.0, 0.5, 3.0]).singular_extremes();
        assert!((smax - 3.0).abs() < 1e-9 && (smin - 0.5).abs() < 1e-9);
    }

    #[test]
    fn nondegeneracy_examples() {
        let rep = check_nondegeneracy(&MapFamily::doubling(), &GridSpec::default()).unwrap();
        assert!(!rep.applicable);

        let f = MapFamily::unimodal(misiurewicz_parameter(), 1e-3).unwrap();
        let rep = check_nondegeneracy(&f, &GridSpec::default()).unwrap();
        assert_eq!(rep.beta, Some(1.0));
        assert!(rep.b_const.unwrap() >= 2.0);

        let v = MapFamily::viana(16, 0.01, misiurewicz_parameter(), 1e-3).unwrap();
        let rep = check_nondegeneracy(&v, &GridSpec::default()).unwrap();
        assert_eq!(rep.beta, Some(1.0));
    }
}
