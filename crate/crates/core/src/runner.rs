//! Runs a configured experiment and writes its artifacts with a manifest.
//!
//! Every file is written below the output directory and listed in
//! `manifest.json` with its sha256. A failed run still writes the manifest,
//! with `status = "incomplete"` and the error.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CorrelationSource, ExperimentConfig, ExperimentKind, FieldName, ObservableName};
use crate::coupling::{common_ell0, joint_tail, min_convolution_k, overlap_v, ConvolutionK, JointTailParams};
use crate::error::{in_module, Error, Result};
use crate::gmy::{check_gcd_condition, construct_partition, find_reference_ball, return_tail_window, return_time_tail, RandomPartition};
use crate::hyperbolic::{hyperbolic_frequency, hyperbolic_times_of};
use crate::mapcore::{MapFamily, PhasePoint};
use crate::noise::{sub_seed, tag, Realization};
use crate::orbit::{iterate_record, OrbitRecord};
use crate::stats::g0::{envelope_field, geometric_onset_field, EnvelopeParams};
use crate::stats::ks::ks_distance_discrete;
use crate::stats::tail::sample_point;
use crate::stats::{
    estimate_tail_measure, extract_g0, fit_stretched_exp, quenched_correlation, CorrelationParams, DecaySeries, Direction,
    StretchedExpFit, TailParams, WindowPolicy,
};
use crate::tower::{
    correlation_fiber_range, equivariance_defect, equivariant_density, tower_correlation, ReturnLaw, Tower, TowerCorrelationParams,
};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
    pub seed_override: Option<u64>,
    pub emit_plots_data: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), workers: 1, seed_override: None, emit_plots_data: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub status: RunStatus,
    pub error: Option<String>,
    /// sha256 of the configuration text as given.
    pub config_sha256: String,
    /// sha256 of the effective configuration after `--seed-override`.
    pub effective_config_sha256: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub seed_overridden: bool,
    pub omega_seeds: Vec<u64>,
    pub workers: usize,
    pub files: Vec<FileEntry>,
}

/// Stretched-exponential fit of one series, or why there is none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub series_id: String,
    pub omega_id: i64,
    /// `ok`, `degenerate: no tail`, or `failed: <reason>`.
    pub status: String,
    #[serde(flatten)]
    pub fit: Option<StretchedExpFit>,
}

impl FitReport {
    pub fn of(series: &DecaySeries, policy: &WindowPolicy) -> Self {
        // n = 0 lies in every tail set, so only later points decide degeneracy
        let (status, fit) = if series.points.iter().all(|p| p.n == 0 || p.value == 0.0) {
            ("degenerate: no tail".to_string(), None)
        } else {
            match fit_stretched_exp(series, policy) {
                Ok(f) => ("ok".to_string(), Some(f)),
                Err(e) => (format!("failed: {e}"), None),
            }
        };
        Self { series_id: series.series_id.clone(), omega_id: series.omega_id, status, fit }
    }
}

/// One stage of the exponent cascade.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CascadeStage {
    pub stage: String,
    pub upsilon: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub r2: f64,
}

impl CascadeStage {
    fn from_fit(stage: &str, f: &StretchedExpFit) -> Self {
        Self { stage: stage.into(), upsilon: f.upsilon, ci_lo: f.upsilon_ci[0], ci_hi: f.upsilon_ci[1], r2: f.r2 }
    }

    fn prescribed(stage: &str, upsilon: f64) -> Self {
        Self { stage: stage.into(), upsilon, ci_lo: upsilon, ci_hi: upsilon, r2: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlotSeries {
    pub csv: String,
    pub series_id: String,
    pub omega_id: i64,
    pub fit: String,
    pub label: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlotBundle {
    pub schema: u32,
    pub kind: String,
    pub series: Vec<PlotSeries>,
    pub fits: Vec<String>,
    pub cascade: Option<String>,
    pub figures: Vec<String>,
}

/// Writes files below the output directory and remembers them.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

pub(crate) fn num(x: f64) -> String {
    format!("{x:?}")
}

impl Output {
    fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name)?)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        fs::write(self.path(name)?, text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn series(&mut self, name: &str, series: &[&DecaySeries]) -> Result<()> {
        let rows = series.iter().flat_map(|s| {
            s.points.iter().map(move |p| {
                vec![
                    s.series_id.clone(),
                    s.omega_id.to_string(),
                    p.n.to_string(),
                    num(p.value),
                    num(p.stderr),
                    p.samples.to_string(),
                    p.censored.to_string(),
                ]
            })
        });
        self.csv(name, &["series_id", "omega_id", "n", "value", "stderr", "samples", "censored"], rows)
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: Output,
    plots: Vec<PlotSeries>,
    cascade: Vec<CascadeStage>,
}

impl Run<'_> {
    fn plot(&mut self, csv: &str, series: &DecaySeries, label: &str) {
        self.plots.push(PlotSeries {
            csv: csv.into(),
            series_id: series.series_id.clone(),
            omega_id: series.omega_id,
            fit: "fit.json".into(),
            label: label.into(),
        });
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads, validates and runs the experiment at `config_path`.
pub fn run_config_file(kind: ExperimentKind, config_path: &Path, opts: &RunOptions) -> Result<Manifest> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    run_experiment(kind, &text, opts)
}

/// Runs `kind` with the TOML configuration `text`. The manifest is written
/// even when the run fails part way; the error is returned afterwards.
pub fn run_experiment(kind: ExperimentKind, text: &str, opts: &RunOptions) -> Result<Manifest> {
    let mut cfg = ExperimentConfig::from_toml(text)?;
    let seed_overridden = opts.seed_override.is_some();
    if let Some(s) = opts.seed_override {
        cfg.seed = Some(s);
    }
    cfg.validate(kind)?;
    if opts.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    fs::create_dir_all(&opts.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.workers)))?;

    let mut run = Run { cfg: &cfg, out: Output { dir: opts.out.clone(), files: vec![] }, plots: vec![], cascade: vec![] };
    info!("running {kind} with seed {} on {} workers", cfg.seed(), opts.workers);
    let result = pool.install(|| dispatch(kind, &mut run));
    let result = result.and_then(|()| if opts.emit_plots_data { write_bundle(kind, &mut run) } else { Ok(()) });

    let mut files = Vec::with_capacity(run.out.files.len());
    for name in &run.out.files {
        let bytes = fs::read(opts.out.join(name))?;
        files.push(FileEntry { path: name.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: kind.name().into(),
        status: if result.is_ok() { RunStatus::Complete } else { RunStatus::Incomplete },
        error: result.as_ref().err().map(|e| e.to_string()),
        config_sha256: sha256_hex(text.as_bytes()),
        effective_config_sha256: sha256_hex(cfg.to_toml().as_bytes()),
        config: cfg.clone(),
        seed: cfg.seed(),
        seed_overridden,
        omega_seeds: cfg.omega_seeds(),
        workers: opts.workers,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(opts.out.join("manifest.json"), text)?;
    result.map(|()| manifest)
}

fn dispatch(kind: ExperimentKind, run: &mut Run) -> Result<()> {
    match kind {
        ExperimentKind::OrbitDump => orbit_dump(run).map_err(in_module("orbit")),
        ExperimentKind::TailDecay => tail_decay(run).map_err(in_module("stats")),
        ExperimentKind::HyperbolicFreq => hyperbolic_freq(run).map_err(in_module("hyperbolic")),
        ExperimentKind::GmyBuild => gmy_build(run).map_err(in_module("gmy")),
        ExperimentKind::TowerSim => tower_sim(run).map_err(in_module("tower")),
        ExperimentKind::CouplingSim => coupling_sim(run).map_err(in_module("coupling")),
        ExperimentKind::CorrelationDecay => correlation_decay(run).map_err(in_module("stats")),
        ExperimentKind::ConvolutionK => convolution_k(run).map_err(in_module("coupling")),
        ExperimentKind::G0Extract => g0_extract(run).map_err(in_module("stats")),
    }
}

fn write_bundle(kind: ExperimentKind, run: &mut Run) -> Result<()> {
    let cascade = if run.cascade.is_empty() {
        None
    } else {
        let rows: Vec<Vec<String>> = run
            .cascade
            .iter()
            .map(|c| vec![c.stage.clone(), num(c.upsilon), num(c.ci_lo), num(c.ci_hi), num(c.r2)])
            .collect();
        run.out.csv("plots/cascade.csv", &["stage", "upsilon", "ci_lo", "ci_hi", "r2"], rows)?;
        Some("plots/cascade.csv".to_string())
    };
    let has_fit = run.out.files.iter().any(|f| f == "fit.json");
    let mut figures = Vec::new();
    if !run.plots.is_empty() {
        figures.push("decay".to_string());
        if has_fit {
            figures.push("linearization".to_string());
        }
    }
    if cascade.is_some() {
        figures.push("cascade".to_string());
    }
    let bundle = PlotBundle {
        schema: MANIFEST_SCHEMA,
        kind: kind.name().into(),
        series: run.plots.clone(),
        fits: if has_fit { vec!["fit.json".into()] } else { vec![] },
        cascade,
        figures,
    };
    run.out.json("plots/bundle.json", &bundle)
}

/// Uniform starting point for orbit `i`, redrawn after critical hits.
fn record_for(family: &MapFamily, omega: &Realization, x0: Option<&[f64]>, i: u64, n: usize, delta: f64) -> Result<OrbitRecord> {
    for attempt in 0..16u64 {
        let x = match x0 {
            Some(x) => PhasePoint::new(x),
            None => sample_point(family, omega, tag("orbit") ^ attempt, i),
        };
        match iterate_record(family, omega, &x, n, delta) {
            Err(Error::CriticalHit(_)) if x0.is_none() => continue,
            r => return r,
        }
    }
    Err(Error::CriticalHit(format!("orbit {i} kept hitting the critical set")))
}

fn orbit_dump(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (family, _) = cfg.family_and_noise()?;
    let omegas = cfg.realizations()?;
    let horizon = cfg.horizon.unwrap_or(0);
    let samples = cfg.samples.unwrap_or(1);
    let delta = cfg.delta.unwrap_or(0.1);
    let dim = family.dim();
    for (w, omega) in omegas.iter().enumerate() {
        let records: Vec<Result<OrbitRecord>> = (0..samples as u64)
            .into_par_iter()
            .map(|i| record_for(&family, omega, cfg.x0.as_deref(), i, horizon, delta))
            .collect();
        for (i, rec) in records.into_iter().enumerate() {
            let rec = rec?;
            let points = rec.points.as_ref().ok_or_else(|| Error::Unsupported("orbit too long to dump".into()))?;
            let mut header = vec!["j".to_string()];
            header.extend((0..dim).map(|k| format!("x{k}")));
            header.extend(["log_inv_norm".to_string(), "log_trunc_dist".to_string()]);
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows = (0..rec.len()).map(|j| {
                let mut r = vec![j.to_string()];
                r.extend(points[j].iter().map(|&c| num(c)));
                r.push(num(rec.log_inv_norm[j]));
                r.push(rec.log_trunc_dist.get(j).map(|&d| num(d)).unwrap_or_default());
                r
            });
            run.out.csv(&format!("orbits/orbit_w{w}_i{i}.csv"), &header, rows)?;
        }
    }
    Ok(())
}

fn tail_decay(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (family, _) = cfg.family_and_noise()?;
    let omegas = cfg.realizations()?;
    let params = TailParams {
        alpha: cfg.alpha.unwrap_or_default(),
        gamma: cfg.gamma_rec.unwrap_or(f64::INFINITY),
        delta: cfg.delta.unwrap_or(0.1),
    };
    let ns = cfg.grid();
    let horizon = cfg.horizon.unwrap_or(0);
    let est = estimate_tail_measure(&family, &omegas, &params, &ns, cfg.samples.unwrap_or(0), horizon)?;
    let mut all: Vec<&DecaySeries> = vec![&est.product];
    all.extend(est.per_omega.iter());
    run.out.series("series.csv", &all)?;
    let policy = cfg.window(WindowPolicy::default());
    let fits: Vec<FitReport> = all.iter().map(|s| FitReport::of(s, &policy)).collect();
    if let Some(f) = &fits[0].fit {
        run.cascade.push(CascadeStage::from_fit("tail", f));
    }
    run.out.json("fit.json", &fits)?;
    run.out.json(
        "report.json",
        &serde_json::json!({
            "family": family.family_id(),
            "horizon": est.horizon,
            "samples": cfg.samples,
            "omegas": omegas.len(),
            "redrawn": est.redrawn,
            "product_status": fits[0].status,
        }),
    )?;
    let product = est.product.clone();
    run.plot("series.csv", &product, "m(Gamma^n)");
    Ok(())
}

fn hyperbolic_freq(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (family, _) = cfg.family_and_noise()?;
    let omegas = cfg.realizations()?;
    let hp = cfg.hyperbolic()?;
    let samples = cfg.samples.unwrap_or(0);
    let horizon = cfg.horizon.unwrap_or(0);
    let delta = cfg.delta.unwrap_or(0.1);
    let jobs: Vec<(usize, u64)> = (0..omegas.len()).flat_map(|w| (0..samples as u64).map(move |i| (w, i))).collect();
    let records: Vec<Result<OrbitRecord>> = jobs
        .par_iter()
        .map(|&(w, i)| {
            let mut r = record_for(&family, &omegas[w], None, i, horizon, delta)?;
            r.points = None;
            Ok(r)
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let times: Vec<Vec<usize>> = records.par_iter().map(|r| hyperbolic_times_of(&r.log_inv_norm, &r.log_trunc_dist, &hp)).collect();
    let stats = hyperbolic_frequency(&records, &hp, cfg.alpha.unwrap_or_default(), cfg.gamma_rec.unwrap_or(f64::INFINITY), cfg.zeta.unwrap_or(0.1))?;

    let rows = jobs.iter().zip(&times).enumerate().map(|(k, (&(w, _), t))| {
        vec![k.to_string(), w.to_string(), t.len().to_string(), num(t.len() as f64 / horizon.max(1) as f64)]
    });
    run.out.csv("frequencies.csv", &["orbit_id", "omega_id", "count", "frequency"], rows)?;
    if cfg.dump_times.unwrap_or(true) {
        let rows = times.iter().enumerate().flat_map(|(k, t)| t.iter().map(move |n| vec![k.to_string(), n.to_string()]));
        run.out.csv("hyperbolic_times.csv", &["orbit_id", "n"], rows)?;
    }
    let mut report = serde_json::to_value(&stats)?;
    report.as_object_mut().expect("object").remove("frequencies");
    report["lambda"] = hp.lambda().into();
    report["b"] = hp.b.into();
    run.out.json("report.json", &report)
}

#[derive(Serialize)]
struct PartitionDump<'a> {
    omega_id: usize,
    omega_seed: u64,
    r0: usize,
    horizon: usize,
    truncated: bool,
    remainder_mass: f64,
    annulus_mass: f64,
    free_mass: f64,
    mass_accounting_error: f64,
    kappa: f64,
    distortion: f64,
    markov_defect: f64,
    stats: &'a crate::gmy::CandidateStats,
    elements: Vec<ElementRow>,
}

#[derive(Serialize)]
struct ElementRow {
    left: f64,
    right: f64,
    n: usize,
    m: usize,
    #[serde(rename = "R")]
    r: usize,
}

fn gmy_build(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (family, noise) = cfg.family_and_noise()?;
    let omegas = cfg.realizations()?;
    let params = cfg.gmy_params()?;
    let horizon = cfg.horizon.unwrap_or(0);
    let (ball, search) = match cfg.fixed_ball() {
        Some(b) => (b?, None),
        None => {
            let probe_seeds: Vec<u64> = (0..cfg.search_probes.unwrap_or(8) as u64).map(|k| sub_seed(cfg.seed(), tag("ball_search"), k)).collect();
            let probes: Vec<Realization> = probe_seeds.iter().map(|&s| Realization::new(s, noise)).collect();
            let search = cfg.ball_search();
            let ball = find_reference_ball(&family, &probes, &params, &search)?;
            (ball, Some((search, probe_seeds)))
        }
    };
    let mut parts: Vec<RandomPartition> = Vec::with_capacity(omegas.len());
    for omega in &omegas {
        parts.push(construct_partition(&family, omega, &ball, horizon, &params)?);
    }
    for (w, p) in parts.iter().enumerate() {
        let dump = PartitionDump {
            omega_id: w,
            omega_seed: p.omega.seed(),
            r0: p.r0,
            horizon: p.horizon,
            truncated: p.truncated,
            remainder_mass: p.remainder_mass,
            annulus_mass: p.annulus_mass,
            free_mass: p.free_mass,
            mass_accounting_error: p.mass_accounting_error(),
            kappa: p.kappa,
            distortion: p.distortion,
            markov_defect: p.markov_defect,
            stats: &p.stats,
            elements: p.elements.iter().map(|e| ElementRow { left: e.left, right: e.right, n: e.n, m: e.m, r: e.r }).collect(),
        };
        run.out.json(&format!("partitions/partition_w{w}.json"), &dump)?;
    }
    let ns: Vec<u64> = if cfg.ns.is_some() || cfg.n_max.is_some() { cfg.grid() } else { (0..=horizon as u64).collect() };
    let tail = return_time_tail(&parts, &ns)?;
    let mut all: Vec<&DecaySeries> = vec![&tail.mean, &tail.envelope];
    all.extend(tail.per_omega.iter());
    run.out.series("series.csv", &all)?;
    let policy = cfg.window(return_tail_window());
    let fits: Vec<FitReport> = all.iter().map(|s| FitReport::of(s, &policy)).collect();
    if let Some(f) = &fits[0].fit {
        run.cascade.push(CascadeStage::from_fit("return_tail", f));
    }
    run.out.json("fit.json", &fits)?;
    let gcd = check_gcd_condition(&parts)?;
    run.out.json("gcd.json", &gcd)?;
    run.out.json(
        "report.json",
        &serde_json::json!({
            "family": family.family_id(),
            "ball": ball,
            "ball_search": search.map(|(s, seeds)| serde_json::json!({"search": s, "probe_seeds": seeds})),
            "r0": params.r0(&ball),
            "delta1_prime": params.delta1_prime(),
            "elements": parts.iter().map(|p| p.elements.len()).collect::<Vec<_>>(),
            "max_mass_accounting_error": parts.iter().map(|p| p.mass_accounting_error()).fold(0.0, f64::max),
            "all_disjoint": parts.iter().all(|p| p.is_disjoint()),
            "gcd": gcd.gcd,
            "mean_status": fits[0].status,
        }),
    )?;
    let mean = tail.mean.clone();
    run.plot("series.csv", &mean, "m(R > n) / m(Delta)");
    Ok(())
}

fn tower_sim(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let specs = cfg.tower_specs()?;
    let n_back = cfg.n_back.unwrap_or(0);
    let horizon = cfg.horizon.unwrap_or(0) as u32;
    let tol = cfg.density_tolerance.unwrap_or(0.05);
    let ladder: Vec<usize> = [n_back / 4, n_back / 2, n_back].into_iter().filter(|&n| n >= 2).collect();
    let ns: Vec<u64> = if cfg.ns.is_some() || cfg.n_max.is_some() { cfg.grid() } else { (0..=horizon as u64).collect() };

    #[derive(Serialize)]
    struct OmegaRow {
        omega_id: usize,
        seed: u64,
        mean_return: f64,
        sup: f64,
        min: f64,
        converged: bool,
        cesaro_change: f64,
        defect_ladder: Vec<(usize, f64)>,
        ell0: Option<u32>,
    }
    let rows: Vec<Result<(OmegaRow, Vec<f64>, DecaySeries)>> = specs
        .par_iter()
        .enumerate()
        .map(|(w, spec)| {
            let lo = -(n_back as i64) - spec.max_return as i64 - 2;
            let tower = Tower::new(spec.clone(), lo, horizon as i64 + 2)?;
            let v = overlap_v(&tower, 0, horizon)?;
            let mut defects = Vec::with_capacity(ladder.len());
            let mut last = None;
            for &nb in &ladder {
                let rho0 = equivariant_density(&tower, 0, nb, tol)?;
                let rho1 = equivariant_density(&tower, 1, nb, tol)?;
                defects.push((nb, equivariance_defect(&tower, &rho0, &rho1)?));
                last = Some(rho0);
            }
            let rho = last.ok_or_else(|| Error::InvalidParameter("n_back must be at least 2".into()))?;
            let fiber = tower.fiber(0)?;
            let mut tail = DecaySeries::new("return_law_tail", w as i64);
            for &n in &ns {
                tail.push(n, fiber.tail(n as u32), 0.0, 0, false);
            }
            let row = OmegaRow {
                omega_id: w,
                seed: spec.seed,
                mean_return: fiber.mean_return(),
                sup: rho.sup,
                min: rho.min,
                converged: rho.converged,
                cesaro_change: rho.cesaro_change,
                defect_ladder: defects,
                ell0: v.ell0,
            };
            Ok((row, v.values, tail))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let overlap_rows = rows
        .iter()
        .flat_map(|(r, v, _)| v.iter().enumerate().map(move |(l, x)| vec![r.omega_id.to_string(), l.to_string(), num(*x)]));
    run.out.csv("overlap.csv", &["omega_id", "ell", "V"], overlap_rows)?;
    let tails: Vec<&DecaySeries> = rows.iter().map(|r| &r.2).collect();
    run.out.series("series.csv", &tails)?;
    let sups: Vec<f64> = rows.iter().map(|r| r.0.sup).collect();
    let mean_sup = sups.iter().sum::<f64>() / sups.len() as f64;
    let spread = sups.iter().map(|s| (s / mean_sup - 1.0).abs()).fold(0.0, f64::max);
    let ell0 = rows.iter().map(|r| r.0.ell0).try_fold(1u32, |a, e| e.map(|e| a.max(e)));
    let max_defect = rows.iter().filter_map(|r| r.0.defect_ladder.last().map(|d| d.1)).fold(0.0, f64::max);
    let omegas: Vec<&OmegaRow> = rows.iter().map(|r| &r.0).collect();
    run.out.json(
        "report.json",
        &serde_json::json!({
            "spec": specs[0],
            "n_back": n_back,
            "common_ell0": ell0,
            "max_defect": max_defect,
            "sup_mean": mean_sup,
            "sup_relative_spread": spread,
            "omegas": omegas,
        }),
    )
}

fn law_upsilon(law: &ReturnLaw) -> Option<f64> {
    match law {
        ReturnLaw::StretchedExp { upsilon, .. } | ReturnLaw::NonUniform { upsilon, .. } => Some(*upsilon),
        ReturnLaw::Geometric { .. } => Some(1.0),
        _ => None,
    }
}

fn coupling_sim(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let specs = cfg.tower_specs()?;
    let horizon = cfg.horizon.unwrap_or(0) as u64;
    let ns = cfg.grid();
    let series: Vec<_> = specs
        .par_iter()
        .map(|s| overlap_v(&Tower::new(s.clone(), 0, horizon as i64 + 2)?, 0, horizon as u32))
        .collect::<Result<_>>()?;
    let detected = common_ell0(&series);
    let (ell0, source) = match (cfg.ell0, detected) {
        (Some(l), _) => (l, "config"),
        (None, Some(l)) => (l, "overlap"),
        (None, None) => {
            return Err(Error::Construction(format!(
                "aperiodicity fails: no l0 with V^l > 0 for all l0 <= l <= {horizon} in every realization"
            )))
        }
    };
    let v_min = series.iter().flat_map(|s| s.values[ell0 as usize..].iter().copied()).fold(f64::INFINITY, f64::min);
    let params = JointTailParams {
        ns: ns.clone(),
        samples: cfg.samples.unwrap_or(0),
        horizon,
        ell0,
        n_back: cfg.n_back.unwrap_or(200),
        laws: cfg.pair_laws(),
        window: cfg.window(WindowPolicy::default()),
    };
    let mut jt = joint_tail(&specs, &params)?;
    for (w, s) in jt.per_omega.iter_mut().enumerate() {
        s.omega_id = w as i64;
    }
    let mut rows = Vec::new();
    let cens = jt.per_omega_censored.iter().copied().chain([jt.censored_fraction]);
    for (s, c) in jt.per_omega.iter().chain([&jt.pooled]).zip(cens) {
        for p in &s.points {
            let cf = if p.n >= horizon { c } else { 0.0 };
            rows.push(vec![s.omega_id.to_string(), p.n.to_string(), num(p.value), num(p.stderr), num(cf)]);
        }
    }
    run.out.csv("joint_tail.csv", &["omega_id", "n", "survival", "stderr", "censored_fraction"], rows)?;
    let mut all: Vec<&DecaySeries> = vec![&jt.pooled];
    all.extend(jt.per_omega.iter());
    run.out.series("series.csv", &all)?;

    let mut fits = vec![match &jt.fit {
        Some(f) => FitReport { series_id: jt.pooled.series_id.clone(), omega_id: -1, status: "ok".into(), fit: Some(f.clone()) },
        None => FitReport::of(&jt.pooled, &params.window),
    }];
    fits.push(FitReport {
        series_id: format!("{}_refit", jt.pooled.series_id),
        omega_id: -1,
        status: if jt.refit.is_some() { "ok".into() } else { "failed: no fit beyond the waiting index".into() },
        fit: jt.refit.clone(),
    });
    if let Some(u) = law_upsilon(&specs[0].law) {
        run.cascade.push(CascadeStage::prescribed("return_law", u));
    }
    if let Some(f) = &jt.fit {
        run.cascade.push(CascadeStage::from_fit("joint_tail", f));
    }
    if let Some(f) = &jt.refit {
        run.cascade.push(CascadeStage::from_fit("joint_tail_refit", f));
    }
    run.out.json("fit.json", &fits)?;
    let min_hazard = jt.hazards.iter().copied().filter(|h| *h > 0.0).fold(f64::INFINITY, f64::min);
    run.out.json(
        "report.json",
        &serde_json::json!({
            "spec": specs[0],
            "ell0": ell0,
            "ell0_source": source,
            "detected_ell0": detected,
            "v_min": v_min,
            "pair_laws": params.laws,
            "samples_per_omega": params.samples,
            "censored_fraction": jt.censored_fraction,
            "waiting": jt.waiting,
            "widened_ci": jt.widened_ci,
            "gap_tail_ratio": jt.gap_ratio,
            "hazards": jt.hazards,
            "hazard_constant": if min_hazard.is_finite() { Some(v_min / min_hazard) } else { None },
            "traces_checked": jt.traces_checked,
        }),
    )?;
    let pooled = jt.pooled.clone();
    run.plot("series.csv", &pooled, "Lambda(T > n)");
    Ok(())
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    Some(if k % 2 == 1 { xs[k / 2] } else { 0.5 * (xs[k / 2 - 1] + xs[k / 2]) })
}

fn correlation_decay(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ns = cfg.grid();
    let samples = cfg.samples.unwrap_or(0);
    let n_back = cfg.n_back.unwrap_or(0);
    let directions = cfg.direction.unwrap_or(crate::config::Directions::Future).list();
    let tower_source = cfg.source == Some(CorrelationSource::Tower);
    // (direction, omega, series, signed, flagged)
    let mut results: Vec<(Direction, usize, DecaySeries, Vec<f64>, bool)> = Vec::new();
    if tower_source {
        let phi = cfg.phi.unwrap_or(ObservableName::Level0).on_tower().expect("validated");
        let psi = cfg.psi.unwrap_or(ObservableName::Level0).on_tower().expect("validated");
        let params = TowerCorrelationParams {
            ns: ns.clone(),
            n_back,
            samples,
            density_tolerance: cfg.density_tolerance.unwrap_or(0.05),
        };
        for (w, spec) in cfg.tower_specs()?.into_iter().enumerate() {
            let (lo, hi) = correlation_fiber_range(&spec, &params);
            let tower = Tower::new(spec, lo, hi)?;
            for &d in &directions {
                let r = tower_correlation(&tower, &phi, &psi, &params, d)?;
                let flagged = !r.widened_ci.is_empty();
                results.push((d, w, r.series, r.signed, flagged));
            }
        }
    } else {
        let (family, _) = cfg.family_and_noise()?;
        let phi = cfg.phi.unwrap_or(ObservableName::Cos).on_map().expect("validated");
        let psi = cfg.psi.unwrap_or(ObservableName::Cos).on_map().expect("validated");
        let params = CorrelationParams { q: cfg.q.unwrap_or(1), ..CorrelationParams::new(ns.clone(), n_back, samples) };
        for (w, omega) in cfg.realizations()?.iter().enumerate() {
            for &d in &directions {
                let r = quenched_correlation(&family, omega, &phi, &psi, &params, d)?;
                results.push((d, w, r.series, r.signed, r.flagged));
            }
        }
    }
    for r in results.iter_mut() {
        r.2.omega_id = r.1 as i64;
    }
    let rows = results.iter().flat_map(|(d, w, s, signed, _)| {
        s.points.iter().zip(signed).map(move |(p, c)| {
            vec![w.to_string(), p.n.to_string(), d.label().to_string(), num(p.value), num(p.stderr), num(*c)]
        })
    });
    run.out.csv("correlation.csv", &["omega_id", "n", "direction", "value", "stderr", "signed"], rows)?;

    let sigmas = cfg.fit_noise_sigmas.unwrap_or(3.0);
    let envelopes: Vec<DecaySeries> = results.iter().map(|r| r.2.upper_envelope(sigmas)).collect();
    let mut all: Vec<&DecaySeries> = results.iter().map(|r| &r.2).collect();
    all.extend(envelopes.iter());
    run.out.series("series.csv", &all)?;
    let policy = cfg.window(WindowPolicy::default());
    let fits: Vec<FitReport> = envelopes.iter().map(|s| FitReport::of(s, &policy)).collect();
    run.out.json("fit.json", &fits)?;

    let mut summary = Vec::new();
    for &d in &directions {
        let picked: Vec<&FitReport> = results.iter().zip(&fits).filter(|(r, _)| r.0 == d).map(|(_, f)| f).collect();
        let ups: Vec<f64> = picked.iter().filter_map(|f| f.fit.as_ref().map(|f| f.upsilon)).collect();
        let med = median(ups.clone());
        if let Some(m) = med {
            let lo = ups.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ups.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            run.cascade.push(CascadeStage { stage: format!("correlation_{}", d.label()), upsilon: m, ci_lo: lo, ci_hi: hi, r2: f64::NAN });
        }
        let first_below: Vec<Option<u64>> = results
            .iter()
            .filter(|r| r.0 == d)
            .map(|r| r.2.points.iter().find(|p| p.value < sigmas * p.stderr).map(|p| p.n))
            .collect();
        summary.push(serde_json::json!({
            "direction": d,
            "first_below_noise": first_below,
            "median_upsilon": med,
            "fitted": ups.len(),
            "flagged": results.iter().filter(|r| r.0 == d && r.4).count(),
        }));
    }
    run.out.json(
        "report.json",
        &serde_json::json!({
            "source": if tower_source { "tower" } else { "map" },
            "samples": samples,
            "n_back": n_back,
            "fit_target": "upper envelope of |C(n)| per realization",
            "directions": summary,
        }),
    )?;
    for (r, e) in results.iter().zip(&envelopes) {
        if r.1 == 0 {
            run.plots.push(PlotSeries {
                csv: "series.csv".into(),
                series_id: e.series_id.clone(),
                omega_id: e.omega_id,
                fit: "fit.json".into(),
                label: format!("|C_{}(n)| envelope", r.0.label()),
            });
        }
    }
    Ok(())
}

fn convolution_k(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let c = cfg.k_c.unwrap_or(1.0);
    let horizon = cfg.k_horizon.unwrap_or(10_000);
    let cap = cfg.k_cap.unwrap_or(1_000_000);
    let grid: Vec<(f64, f64)> = cfg
        .k_gammas
        .iter()
        .flatten()
        .flat_map(|&g| cfg.k_upsilons.iter().flatten().map(move |&u| (g, u)))
        .collect();
    let results: Vec<(f64, f64, Result<ConvolutionK>)> =
        grid.par_iter().map(|&(g, u)| (g, u, min_convolution_k(c, g, u, horizon, cap))).collect();
    let rows = results.iter().map(|(g, u, r)| match r {
        Ok(k) => vec![
            num(c),
            num(*g),
            num(*u),
            k.k.to_string(),
            num(k.worst_log_ratio),
            k.witness.map(|w| w.to_string()).unwrap_or_default(),
            k.subadditive.to_string(),
            "ok".into(),
        ],
        Err(e) => vec![num(c), num(*g), num(*u), String::new(), String::new(), String::new(), String::new(), format!("failed: {e}")],
    });
    run.out.csv("k.csv", &["C", "gamma", "upsilon", "K", "worst_log_ratio", "witness", "subadditive", "status"], rows)?;
    let report: Vec<serde_json::Value> = results
        .iter()
        .map(|(g, u, r)| match r {
            Ok(k) => serde_json::to_value(k).expect("serializes"),
            Err(e) => serde_json::json!({"C": c, "gamma": g, "upsilon": u, "error": e.to_string()}),
        })
        .collect();
    run.out.json("k_report.json", &report)?;
    match results.iter().find_map(|r| r.2.as_ref().err()) {
        Some(e) => Err(Error::Fit(format!("some grid points have no admissible K: {e}"))),
        None => Ok(()),
    }
}

fn g0_extract(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let params = EnvelopeParams::new(cfg.env_c.unwrap_or(0.0), cfg.env_gamma.unwrap_or(0.0), cfg.env_upsilon.unwrap_or(0.0))?;
    let grid = cfg.grid();
    let m = cfg.omega_count();
    let (field, onsets) = match cfg.field.unwrap_or(FieldName::Envelope) {
        FieldName::Envelope => (envelope_field(m, &grid, &params, cfg.seed()), None),
        FieldName::GeometricOnset => {
            let (f, o) = geometric_onset_field(cfg.onset_p.unwrap_or(0.5), m, &grid, &params, cfg.seed())?;
            (f, Some(o))
        }
    };
    let report = extract_g0(&field, &params)?;
    let rows = report.g0.iter().map(|(w, v)| match v {
        crate::stats::g0::G0Value::At(n) => vec![w.to_string(), n.to_string(), "false".into()],
        crate::stats::g0::G0Value::Censored => vec![w.to_string(), String::new(), "true".into()],
    });
    run.out.csv("g0.csv", &["omega_id", "g0", "censored"], rows)?;
    run.out.series("series.csv", &[&report.tail])?;
    let resolved: Vec<&crate::stats::SeriesPoint> = report.tail.points.iter().filter(|p| !p.censored).collect();
    let worst_ratio = resolved.iter().map(|p| p.value / params.threshold(p.n)).fold(0.0, f64::max);
    let ks = onsets.as_ref().map(|_| {
        let q = cfg.onset_p.unwrap_or(0.5);
        let k_max = grid.last().copied().unwrap_or(0);
        ks_distance_discrete(&report.resolved_values(), |k| 1.0 - (1.0 - q).powi(k as i32 + 1), k_max)
    });
    run.out.json(
        "report.json",
        &serde_json::json!({
            "params": params,
            "field": cfg.field.unwrap_or(FieldName::Envelope),
            "realizations": m,
            "censored_fraction": report.censored_fraction,
            "resolved_points": resolved.len(),
            "dominated_by_threshold": worst_ratio <= 1.0,
            "worst_tail_to_threshold": worst_ratio,
            "ks_to_generator": ks,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_report_marks_zero_series_degenerate() {
        let s = DecaySeries::from_fn("tail", &[0, 1, 2, 3], |_| 0.0);
        let r = FitReport::of(&s, &WindowPolicy::default());
        assert_eq!(r.status, "degenerate: no tail");
        assert!(r.fit.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("upsilon").is_none());
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1e-7, 12345.678, -0.0, 1.0 / 3.0] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
