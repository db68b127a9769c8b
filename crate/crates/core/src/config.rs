//! Flat TOML experiment configuration.
//!
//! Every key lives at the top level; `docs/config.md` lists them per
//! experiment kind. Unknown keys are rejected, all of them at once.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coupling::PairLaw;
use crate::error::{Error, Result};
use crate::gmy::{BallSearch, GmyParams, ReferenceBall};
use crate::hyperbolic::HyperbolicParams;
use crate::mapcore::{misiurewicz_parameter, MapFamily};
use crate::noise::{NoiseModel, Realization};
use crate::stats::{log_grid, Direction, WindowPolicy};
use crate::tower::{Cell, ReturnLaw, TowerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OrbitDump,
    TailDecay,
    HyperbolicFreq,
    GmyBuild,
    TowerSim,
    CouplingSim,
    CorrelationDecay,
    #[serde(rename = "convolution-K")]
    ConvolutionK,
    G0Extract,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::OrbitDump,
        ExperimentKind::TailDecay,
        ExperimentKind::HyperbolicFreq,
        ExperimentKind::GmyBuild,
        ExperimentKind::TowerSim,
        ExperimentKind::CouplingSim,
        ExperimentKind::CorrelationDecay,
        ExperimentKind::ConvolutionK,
        ExperimentKind::G0Extract,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::OrbitDump => "orbit-dump",
            ExperimentKind::TailDecay => "tail-decay",
            ExperimentKind::HyperbolicFreq => "hyperbolic-freq",
            ExperimentKind::GmyBuild => "gmy-build",
            ExperimentKind::TowerSim => "tower-sim",
            ExperimentKind::CouplingSim => "coupling-sim",
            ExperimentKind::CorrelationDecay => "correlation-decay",
            ExperimentKind::ConvolutionK => "convolution-K",
            ExperimentKind::G0Extract => "g0-extract",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    #[default]
    Doubling,
    TorusNue,
    Viana,
    Unimodal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawName {
    #[default]
    Fixed,
    Geometric,
    StretchedExp,
    NonUniform,
    Cells,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Linear,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSource {
    Map,
    Tower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    Future,
    Past,
    Both,
}

impl Directions {
    pub fn list(&self) -> Vec<Direction> {
        match self {
            Directions::Future => vec![Direction::Future],
            Directions::Past => vec![Direction::Past],
            Directions::Both => vec![Direction::Future, Direction::Past],
        }
    }
}

/// Observables on the phase space (`map`) or on the tower (`tower`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableName {
    /// `cos(2 pi x_0)`.
    Cos,
    /// `sin(2 pi x_0)`.
    Sin,
    /// `x_0`.
    Coord,
    /// Indicator of the tower base.
    Level0,
    /// Base coordinate on level 0, zero above.
    BaseCoord,
}

impl ObservableName {
    pub fn on_map(&self) -> Option<fn(&[f64]) -> f64> {
        match self {
            ObservableName::Cos => Some(|x| (std::f64::consts::TAU * x[0]).cos()),
            ObservableName::Sin => Some(|x| (std::f64::consts::TAU * x[0]).sin()),
            ObservableName::Coord => Some(|x| x[0]),
            _ => None,
        }
    }

    pub fn on_tower(&self) -> Option<fn(f64, u32) -> f64> {
        match self {
            ObservableName::Level0 => Some(|_, l| if l == 0 { 1.0 } else { 0.0 }),
            ObservableName::BaseCoord => Some(|x, l| if l == 0 { x } else { 0.0 }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    #[default]
    Envelope,
    GeometricOnset,
}

/// One experiment. Which keys are required depends on `kind`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub omegas: Option<usize>,
    pub samples: Option<usize>,
    pub horizon: Option<usize>,
    pub n_back: Option<usize>,

    pub ns: Option<Vec<u64>>,
    pub n_max: Option<u64>,
    pub grid: Option<GridKind>,
    pub n_step: Option<u64>,
    pub per_decade: Option<usize>,

    pub family: Option<FamilyName>,
    pub epsilon: Option<f64>,
    pub dim: Option<usize>,
    pub intermittency: Option<f64>,
    pub expansion: Option<u32>,
    pub amplitude: Option<f64>,
    pub p0: Option<f64>,
    pub a: Option<f64>,
    pub x0: Option<Vec<f64>>,

    pub alpha: Option<f64>,
    pub gamma_rec: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub log_lambda: Option<f64>,
    pub b: Option<f64>,
    pub zeta: Option<f64>,
    pub dump_times: Option<bool>,

    pub delta1: Option<f64>,
    pub ball_center: Option<f64>,
    pub ball_radius: Option<f64>,
    pub ball_lag: Option<usize>,
    pub ball_k0: Option<f64>,
    pub search_centers: Option<Vec<f64>>,
    pub search_radii: Option<Vec<f64>>,
    pub search_max_lag: Option<usize>,
    pub search_k0: Option<f64>,
    pub search_samples: Option<usize>,
    pub search_probe_horizon: Option<usize>,
    pub search_coverage: Option<f64>,
    pub search_probes: Option<usize>,

    pub fit_max_value: Option<f64>,
    pub fit_min_value: Option<f64>,
    pub fit_noise_sigmas: Option<f64>,
    pub fit_min_points: Option<usize>,

    pub law: Option<LawName>,
    pub law_r: Option<u32>,
    pub law_p: Option<f64>,
    pub law_jitter: Option<f64>,
    pub law_c: Option<f64>,
    pub law_gamma: Option<f64>,
    pub law_upsilon: Option<f64>,
    pub law_weight: Option<f64>,
    pub law_onset_p: Option<f64>,
    pub cell_mass: Option<Vec<f64>>,
    pub cell_r: Option<Vec<u32>>,
    pub max_return: Option<u32>,
    pub branches: Option<u32>,
    pub beta: Option<f64>,

    pub ell0: Option<u32>,
    pub pair_law_x: Option<PairLaw>,
    pub pair_law_y: Option<PairLaw>,

    pub source: Option<CorrelationSource>,
    pub phi: Option<ObservableName>,
    pub psi: Option<ObservableName>,
    pub direction: Option<Directions>,
    pub q: Option<u64>,
    pub density_tolerance: Option<f64>,

    pub k_c: Option<f64>,
    pub k_gammas: Option<Vec<f64>>,
    pub k_upsilons: Option<Vec<f64>>,
    pub k_horizon: Option<u64>,
    pub k_cap: Option<u64>,

    pub field: Option<FieldName>,
    pub env_c: Option<f64>,
    pub env_gamma: Option<f64>,
    pub env_upsilon: Option<f64>,
    pub onset_p: Option<f64>,
}

/// Keys accepted at the top level, in declaration order.
pub fn known_keys() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("config serializes to an object"),
    }
}

/// Collects validation problems so that one run reports all of them.
#[derive(Default)]
struct Problems(Vec<String>);

impl Problems {
    fn need<T: Copy>(&mut self, key: &str, v: Option<T>) -> T
    where
        T: Default,
    {
        if v.is_none() {
            self.0.push(format!("missing key '{key}'"));
        }
        v.unwrap_or_default()
    }

    fn need_vec<T: Clone>(&mut self, key: &str, v: &Option<Vec<T>>) -> Vec<T> {
        if v.is_none() {
            self.0.push(format!("missing key '{key}'"));
        }
        v.clone().unwrap_or_default()
    }

    fn check(&mut self, ok: bool, key: &str, msg: impl fmt::Display) {
        if !ok {
            self.0.push(format!("'{key}': {msg}"));
        }
    }

    fn unused<T>(&mut self, key: &str, v: &Option<T>, kind: ExperimentKind) {
        if v.is_some() {
            self.0.push(format!("'{key}' has no effect for {kind}"));
        }
    }

    fn finish(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.0.join("; ")))
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, listing every unknown key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known: BTreeSet<String> = known_keys().into_iter().collect();
        let unknown: Vec<&String> = table.keys().filter(|k| !known.contains(*k)).collect();
        if !unknown.is_empty() {
            let list: Vec<String> = unknown.iter().map(|k| format!("'{k}'")).collect();
            return Err(Error::Config(format!("unknown keys: {}", list.join(", "))));
        }
        let nested: Vec<&String> = table.iter().filter(|(_, v)| v.is_table()).map(|(k, _)| k).collect();
        if !nested.is_empty() {
            return Err(Error::Config(format!("configuration is flat; tables are not allowed: {nested:?}")));
        }
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks keys and ranges for `kind`, reporting every problem.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        let mut p = Problems::default();
        if let Some(k) = self.kind {
            p.check(k == kind, "kind", format!("config is for {k}, not {kind}"));
        }
        p.need("seed", self.seed);
        if let Some(m) = self.omegas {
            p.check(m >= 1, "omegas", "must be at least 1");
        }
        let needs_map = matches!(
            kind,
            ExperimentKind::OrbitDump | ExperimentKind::TailDecay | ExperimentKind::HyperbolicFreq | ExperimentKind::GmyBuild
        ) || (kind == ExperimentKind::CorrelationDecay && self.source != Some(CorrelationSource::Tower));
        let needs_tower = matches!(kind, ExperimentKind::TowerSim | ExperimentKind::CouplingSim)
            || (kind == ExperimentKind::CorrelationDecay && self.source == Some(CorrelationSource::Tower));
        if needs_map {
            self.validate_family(&mut p);
        } else {
            for (k, v) in [("epsilon", self.epsilon.is_some()), ("family", self.family.is_some())] {
                if v {
                    p.0.push(format!("'{k}' has no effect for {kind}"));
                }
            }
        }
        if needs_tower {
            self.validate_tower(&mut p);
        }
        if let Some(v) = self.fit_max_value {
            p.check(v > 0.0 && v <= 1.0, "fit_max_value", "must lie in (0, 1]");
        }
        if let Some(v) = self.fit_min_points {
            p.check(v >= 3, "fit_min_points", "must be at least 3");
        }
        match kind {
            ExperimentKind::OrbitDump => {
                p.need("horizon", self.horizon);
                if let (Some(x0), Some(f)) = (&self.x0, self.family) {
                    let dim = match f {
                        FamilyName::TorusNue => self.dim.unwrap_or(2),
                        FamilyName::Viana => 2,
                        _ => 1,
                    };
                    p.check(x0.len() == dim, "x0", format!("needs {dim} coordinates"));
                }
            }
            ExperimentKind::TailDecay => {
                p.need("samples", self.samples);
                p.need("horizon", self.horizon);
                p.need("alpha", self.alpha);
                self.validate_grid(&mut p);
                self.validate_critical(&mut p);
            }
            ExperimentKind::HyperbolicFreq => {
                p.need("samples", self.samples);
                p.need("horizon", self.horizon);
                p.need("alpha", self.alpha);
                self.validate_hyperbolic(&mut p);
                self.validate_critical(&mut p);
                if let Some(z) = self.zeta {
                    p.check(z > 0.0 && z <= 1.0, "zeta", "must lie in (0, 1]");
                }
            }
            ExperimentKind::GmyBuild => {
                p.need("horizon", self.horizon);
                p.need("delta", self.delta);
                p.need("delta1", self.delta1);
                self.validate_hyperbolic(&mut p);
                p.check(
                    !matches!(self.family, Some(FamilyName::TorusNue | FamilyName::Viana)),
                    "family",
                    "partitions are built for 1-D families only",
                );
                let fixed = [self.ball_center.is_some(), self.ball_radius.is_some(), self.ball_lag.is_some(), self.ball_k0.is_some()];
                if fixed.iter().any(|&b| b) {
                    p.check(fixed.iter().all(|&b| b), "ball_center", "ball_center, ball_radius, ball_lag and ball_k0 go together");
                } else {
                    p.need_vec("search_centers", &self.search_centers);
                    p.need_vec("search_radii", &self.search_radii);
                }
            }
            ExperimentKind::TowerSim => {
                p.need("n_back", self.n_back);
                p.need("horizon", self.horizon);
            }
            ExperimentKind::CouplingSim => {
                p.need("samples", self.samples);
                p.need("horizon", self.horizon);
                self.validate_grid(&mut p);
                if let Some(l) = self.ell0 {
                    p.check(l >= 1, "ell0", "must be at least 1");
                }
                if [self.pair_law_x, self.pair_law_y].contains(&Some(PairLaw::Equivariant)) {
                    p.need("n_back", self.n_back);
                }
            }
            ExperimentKind::CorrelationDecay => {
                p.need("samples", self.samples);
                p.need("n_back", self.n_back);
                self.validate_grid(&mut p);
                let tower = self.source == Some(CorrelationSource::Tower);
                for (key, o) in [("phi", self.phi), ("psi", self.psi)] {
                    if let Some(o) = o {
                        let ok = if tower { o.on_tower().is_some() } else { o.on_map().is_some() };
                        p.check(ok, key, format!("{o:?} is not an observable on the {}", if tower { "tower" } else { "phase space" }));
                    }
                }
                if let Some(q) = self.q {
                    p.check(q >= 1, "q", "must be at least 1");
                }
            }
            ExperimentKind::ConvolutionK => {
                let c = p.need("k_c", self.k_c);
                p.check(c > 0.0, "k_c", "must be positive");
                for g in p.need_vec("k_gammas", &self.k_gammas) {
                    p.check(g > 0.0, "k_gammas", format!("{g} is not positive"));
                }
                for u in p.need_vec("k_upsilons", &self.k_upsilons) {
                    p.check(u > 0.0 && u <= 1.0, "k_upsilons", format!("{u} is outside (0, 1]"));
                }
            }
            ExperimentKind::G0Extract => {
                self.validate_grid(&mut p);
                let c = p.need("env_c", self.env_c);
                let g = p.need("env_gamma", self.env_gamma);
                let u = p.need("env_upsilon", self.env_upsilon);
                p.check(c > 0.0 && g > 0.0, "env_c", "C and gamma must be positive");
                p.check(u > 0.0 && u <= 1.0, "env_upsilon", "must lie in (0, 1]");
                if p.need("field", self.field) == FieldName::GeometricOnset {
                    let q = p.need("onset_p", self.onset_p);
                    p.check(q > 0.0 && q < 1.0, "onset_p", "must lie in (0, 1)");
                }
            }
        }
        if kind != ExperimentKind::OrbitDump {
            p.unused("x0", &self.x0, kind);
        }
        if kind != ExperimentKind::CouplingSim {
            p.unused("ell0", &self.ell0, kind);
        }
        if kind != ExperimentKind::ConvolutionK {
            p.unused("k_gammas", &self.k_gammas, kind);
        }
        p.finish()
    }

    fn validate_family(&self, p: &mut Problems) {
        let f = p.need("family", self.family);
        let eps = p.need("epsilon", self.epsilon);
        p.check(eps >= 0.0, "epsilon", "must be nonnegative (0 is the deterministic baseline)");
        if self.family.is_none() {
            return;
        }
        if let Err(e) = self.family_and_noise() {
            p.0.push(format!("family: {e}"));
        }
        if f == FamilyName::TorusNue {
            if let Some(a) = self.intermittency {
                p.check(a > 0.0 && a < 1.0, "intermittency", "must lie in (0, 1)");
            }
        }
        if let Some(d) = self.delta {
            p.check(d > 0.0, "delta", "must be positive");
        }
    }

    fn validate_critical(&self, p: &mut Problems) {
        if self.family.is_some_and(|f| matches!(f, FamilyName::Viana | FamilyName::Unimodal)) {
            p.need("gamma_rec", self.gamma_rec);
            p.need("delta", self.delta);
        }
    }

    fn validate_hyperbolic(&self, p: &mut Problems) {
        match (self.lambda, self.log_lambda) {
            (Some(_), Some(_)) => p.0.push("give one of 'lambda' and 'log_lambda'".into()),
            (None, None) => p.0.push("missing key 'lambda' (or 'log_lambda')".into()),
            _ => {
                if let Err(e) = self.hyperbolic() {
                    p.0.push(format!("lambda: {e}"));
                }
            }
        }
    }

    fn validate_grid(&self, p: &mut Problems) {
        if self.ns.is_none() && self.n_max.is_none() && self.horizon.is_none() {
            p.0.push("missing key 'ns' (or 'n_max', or 'horizon')".into());
        }
        if let (Some(ns), Some(h)) = (&self.ns, self.horizon) {
            p.check(ns.iter().all(|&n| n as usize <= h), "ns", "grid extends beyond the horizon");
        }
        if let (Some(n), Some(h)) = (self.n_max, self.horizon) {
            p.check(n as usize <= h, "n_max", "exceeds the horizon");
        }
        if let Some(s) = self.n_step {
            p.check(s >= 1, "n_step", "must be at least 1");
        }
    }

    fn validate_tower(&self, p: &mut Problems) {
        let law = p.need("law", self.law);
        if self.law.is_none() {
            return;
        }
        let missing = |p: &mut Problems, keys: &[(&str, bool)]| {
            for (k, present) in keys {
                if !present {
                    p.0.push(format!("missing key '{k}' for law {law:?}"));
                }
            }
        };
        match law {
            LawName::Fixed => missing(p, &[("law_r", self.law_r.is_some())]),
            LawName::Geometric => missing(p, &[("law_p", self.law_p.is_some())]),
            LawName::StretchedExp => missing(
                p,
                &[("law_c", self.law_c.is_some()), ("law_gamma", self.law_gamma.is_some()), ("law_upsilon", self.law_upsilon.is_some())],
            ),
            LawName::NonUniform => missing(
                p,
                &[
                    ("law_c", self.law_c.is_some()),
                    ("law_gamma", self.law_gamma.is_some()),
                    ("law_upsilon", self.law_upsilon.is_some()),
                    ("law_weight", self.law_weight.is_some()),
                    ("law_onset_p", self.law_onset_p.is_some()),
                ],
            ),
            LawName::Cells => {
                missing(p, &[("cell_mass", self.cell_mass.is_some()), ("cell_r", self.cell_r.is_some())]);
                if let (Some(m), Some(r)) = (&self.cell_mass, &self.cell_r) {
                    p.check(m.len() == r.len(), "cell_mass", "cell_mass and cell_r differ in length");
                }
            }
        }
        if p.0.is_empty() {
            if let Err(e) = self.tower_spec(0) {
                p.0.push(format!("law: {e}"));
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn omega_count(&self) -> usize {
        self.omegas.unwrap_or(1)
    }

    /// Seed of realization `w`.
    pub fn omega_seed(&self, w: usize) -> u64 {
        self.seed().wrapping_add(w as u64)
    }

    pub fn omega_seeds(&self) -> Vec<u64> {
        (0..self.omega_count()).map(|w| self.omega_seed(w)).collect()
    }

    pub fn family_and_noise(&self) -> Result<(MapFamily, NoiseModel)> {
        let eps = self.epsilon.unwrap_or(0.0);
        let family = match self.family {
            Some(FamilyName::Doubling) => MapFamily::doubling(),
            Some(FamilyName::TorusNue) => MapFamily::torus_nue(self.dim.unwrap_or(2), self.intermittency.unwrap_or(0.5))?,
            Some(FamilyName::Viana) => MapFamily::viana(
                self.expansion.unwrap_or(16),
                self.amplitude.unwrap_or(0.01),
                self.p0.unwrap_or_else(misiurewicz_parameter),
                eps,
            )?,
            Some(FamilyName::Unimodal) => MapFamily::unimodal(self.a.unwrap_or_else(misiurewicz_parameter), eps)?,
            None => return Err(Error::Config("missing key 'family'".into())),
        };
        let noise = if family.noise_dim() == 1 { NoiseModel::interval(eps)? } else { NoiseModel::ball(eps, family.noise_dim())? };
        let family = match self.b {
            Some(b) if family.critical.is_some() => family.with_b(b)?,
            _ => family,
        };
        Ok((family, noise))
    }

    pub fn realizations(&self) -> Result<Vec<Realization>> {
        let (_, noise) = self.family_and_noise()?;
        Ok(self.omega_seeds().into_iter().map(|s| Realization::new(s, noise)).collect())
    }

    pub fn hyperbolic(&self) -> Result<HyperbolicParams> {
        let b = self.b.unwrap_or(0.49);
        match (self.lambda, self.log_lambda) {
            (Some(l), None) => HyperbolicParams::new(l, b),
            (None, Some(l)) => HyperbolicParams::from_log_rate(l, b),
            _ => Err(Error::Config("give exactly one of 'lambda' and 'log_lambda'".into())),
        }
    }

    /// Grid `ns`: explicit, or `0..=n_max` linear with `n_step`, or log-spaced.
    pub fn grid(&self) -> Vec<u64> {
        if let Some(ns) = &self.ns {
            return ns.clone();
        }
        let hi = self.n_max.or(self.horizon.map(|h| h as u64)).unwrap_or(0);
        match self.grid.unwrap_or(GridKind::Linear) {
            GridKind::Linear => (0..=hi).step_by(self.n_step.unwrap_or(1).max(1) as usize).collect(),
            GridKind::Log => {
                let mut g = vec![0];
                g.extend(log_grid(1, hi.max(1), self.per_decade.unwrap_or(10)));
                g
            }
        }
    }

    pub fn window(&self, base: WindowPolicy) -> WindowPolicy {
        WindowPolicy {
            max_value: self.fit_max_value.unwrap_or(base.max_value),
            min_value: self.fit_min_value.unwrap_or(base.min_value),
            noise_sigmas: self.fit_noise_sigmas.unwrap_or(base.noise_sigmas),
            min_points: self.fit_min_points.unwrap_or(base.min_points),
            ..base
        }
    }

    pub fn return_law(&self) -> Result<ReturnLaw> {
        let get = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::Config(format!("missing key '{k}'")));
        Ok(match self.law {
            Some(LawName::Fixed) => ReturnLaw::Fixed { r: self.law_r.ok_or_else(|| Error::Config("missing key 'law_r'".into()))? },
            Some(LawName::Geometric) => ReturnLaw::Geometric { p: get(self.law_p, "law_p")?, jitter: self.law_jitter.unwrap_or(0.0) },
            Some(LawName::StretchedExp) => ReturnLaw::StretchedExp {
                c: get(self.law_c, "law_c")?,
                gamma: get(self.law_gamma, "law_gamma")?,
                upsilon: get(self.law_upsilon, "law_upsilon")?,
            },
            Some(LawName::NonUniform) => ReturnLaw::NonUniform {
                c: get(self.law_c, "law_c")?,
                gamma: get(self.law_gamma, "law_gamma")?,
                upsilon: get(self.law_upsilon, "law_upsilon")?,
                weight: get(self.law_weight, "law_weight")?,
                onset_p: get(self.law_onset_p, "law_onset_p")?,
            },
            Some(LawName::Cells) => {
                let mass = self.cell_mass.clone().unwrap_or_default();
                let r = self.cell_r.clone().unwrap_or_default();
                ReturnLaw::Cells { cells: mass.into_iter().zip(r).map(|(mass, r)| Cell { mass, r }).collect() }
            }
            None => return Err(Error::Config("missing key 'law'".into())),
        })
    }

    /// Tower of realization `w`.
    pub fn tower_spec(&self, w: usize) -> Result<TowerSpec> {
        let law = self.return_law()?;
        let max_return = self.max_return.unwrap_or(match &law {
            ReturnLaw::Fixed { r } => *r,
            ReturnLaw::Cells { cells } => cells.iter().map(|c| c.r).max().unwrap_or(1),
            _ => 200,
        });
        let mut spec = TowerSpec::new(law, self.omega_seed(w), max_return)?.with_branches(self.branches.unwrap_or(1))?;
        if let Some(beta) = self.beta {
            spec.beta = beta;
            spec.validate()?;
        }
        Ok(spec)
    }

    pub fn tower_specs(&self) -> Result<Vec<TowerSpec>> {
        (0..self.omega_count()).map(|w| self.tower_spec(w)).collect()
    }

    pub fn gmy_params(&self) -> Result<GmyParams> {
        let delta = self.delta.ok_or_else(|| Error::Config("missing key 'delta'".into()))?;
        let delta1 = self.delta1.ok_or_else(|| Error::Config("missing key 'delta1'".into()))?;
        Ok(GmyParams::new(self.hyperbolic()?, delta, delta1))
    }

    pub fn fixed_ball(&self) -> Option<Result<ReferenceBall>> {
        match (self.ball_center, self.ball_radius, self.ball_lag, self.ball_k0) {
            (Some(c), Some(r), Some(l), Some(k)) => Some(ReferenceBall::new(c, r, l, k)),
            _ => None,
        }
    }

    pub fn ball_search(&self) -> BallSearch {
        BallSearch {
            centers: self.search_centers.clone().unwrap_or_default(),
            radii: self.search_radii.clone().unwrap_or_default(),
            max_lag: self.search_max_lag.unwrap_or(10),
            k0: self.search_k0.unwrap_or(2.0),
            samples: self.search_samples.unwrap_or(400),
            probe_horizon: self.search_probe_horizon.unwrap_or(200),
            coverage: self.search_coverage.unwrap_or(0.0),
        }
    }

    pub fn pair_laws(&self) -> (PairLaw, PairLaw) {
        (self.pair_law_x.unwrap_or(PairLaw::Base), self.pair_law_y.unwrap_or(PairLaw::Base))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ExperimentConfig::from_toml("seed = 1\nsamlpes = 3\nepsilon = 0.1\nhorizn = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'samlpes'") && msg.contains("'horizn'"), "{msg}");
    }

    #[test]
    fn validation_lists_every_missing_key() {
        let c = ExperimentConfig::from_toml("seed = 1\nfamily = \"doubling\"\nepsilon = 0.0\n").unwrap();
        let msg = c.validate(ExperimentKind::TailDecay).unwrap_err().to_string();
        for k in ["samples", "horizon", "alpha"] {
            assert!(msg.contains(&format!("'{k}'")), "{msg}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
            let c = ExperimentConfig { kind: Some(k), ..Default::default() };
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap().kind, Some(k));
        }
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        let c = ExperimentConfig::from_toml("seed = 1\nfamily = \"doubling\"\nepsilon = -0.1\nhorizon = 3\n").unwrap();
        assert!(c.validate(ExperimentKind::OrbitDump).is_err());
    }
}
