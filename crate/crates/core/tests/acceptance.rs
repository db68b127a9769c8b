//! Acceptance criteria A1-A10. Each test prints one PASS/FAIL line.

use std::f64::consts::{LN_2, TAU};
use std::time::Instant;

use quenched::config::ExperimentKind;
use quenched::coupling::{common_ell0, joint_tail, min_convolution_k, overlap_v, JointTailParams, PairLaw};
use quenched::gmy::{
    check_gcd_condition, construct_partition, find_reference_ball, return_tail_window, return_time_tail, BallSearch, GmyParams,
    ReferenceBall,
};
use quenched::hyperbolic::{hyperbolic_frequency, hyperbolic_times, hyperbolic_times_of, HyperbolicParams};
use quenched::mapcore::{misiurewicz_parameter, MapFamily};
use quenched::noise::{tag, CounterRng, NoiseModel, Realization};
use quenched::orbit::{expansion_time_of, iterate_record, recurrence_time_of};
use quenched::runner::{run_experiment, RunOptions};
use quenched::stats::g0::{envelope_field, geometric_onset_field, EnvelopeParams};
use quenched::stats::ks::ks_distance_discrete;
use quenched::stats::tail::sample_point;
use quenched::stats::{
    estimate_tail_measure, extract_g0, fit_stretched_exp, log_grid, quenched_correlation, CorrelationParams, DecaySeries,
    Direction, StretchedExpFit, TailParams, WindowPolicy,
};
use quenched::tower::{
    correlation_fiber_range, equivariance_defect, equivariant_density, tower_correlation, ReturnLaw, Tower,
    TowerCorrelationParams, TowerSpec,
};

mod common;
use common::{brute_convolution_violation, brute_first_time, brute_hyperbolic_times, dyadic, dyadic_oracle};

fn verdict(id: &str, pass: bool, detail: String) {
    println!("{id} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} failed: {detail}");
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn show(f: &StretchedExpFit) -> String {
    format!("upsilon {:.3} CI [{:.3}, {:.3}] R2 {:.4} n in [{}, {}]", f.upsilon, f.upsilon_ci[0], f.upsilon_ci[1], f.r2, f.window.n_lo, f.window.n_hi)
}

/// Median over realizations of the envelope fit exponent; failed fits count as 0.
fn median_envelope_upsilon(series: &[DecaySeries]) -> (f64, usize) {
    let fits: Vec<Option<StretchedExpFit>> =
        series.iter().map(|s| fit_stretched_exp(&s.upper_envelope(3.0), &WindowPolicy::default()).ok()).collect();
    let ok = fits.iter().flatten().count();
    (median(fits.iter().map(|f| f.as_ref().map_or(0.0, |f| f.upsilon)).collect()), ok)
}

#[test]
fn a1_detector_oracle_equivalence() {
    let t = Instant::now();
    let params = HyperbolicParams::from_log_rate(-0.125, 0.5).unwrap();
    let (mut mismatches, mut times) = (0, 0usize);
    for s in 0..1000u64 {
        let mut rng = CounterRng::for_task(17, tag("a1"), s);
        let l: Vec<f64> = (0..1000).map(|_| dyadic(&mut rng, -1.5, 1.0)).collect();
        let d: Vec<f64> = (0..1000).map(|_| if rng.uniform() < 0.9 { 0.0 } else { dyadic(&mut rng, 0.0, 6.0) }).collect();
        let fast = hyperbolic_times_of(&l, &d, &params);
        times += fast.len();
        let alpha = dyadic(&mut rng, 0.0, 0.5);
        let gamma = dyadic(&mut rng, 0.0, 0.5);
        if fast != brute_hyperbolic_times(&l, &d, &params)
            || expansion_time_of(&l, alpha) != brute_first_time(&l, -alpha)
            || recurrence_time_of(&d, gamma) != brute_first_time(&d, gamma)
        {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        "A1",
        mismatches == 0 && secs < 60.0,
        format!("{mismatches} mismatches over 1000 sequences of length 1000 ({times} hyperbolic times), {secs:.1}s"),
    );
}

#[test]
fn a2_trivial_baseline() {
    let f = MapFamily::doubling();
    let mut details = Vec::new();
    let mut pass = true;
    for eps in [0.0, 1e-3] {
        let omegas: Vec<_> = (0..4).map(|s| Realization::new(s, NoiseModel::interval(eps).unwrap())).collect();
        let ns: Vec<u64> = (0..=50).collect();
        let tail = estimate_tail_measure(&f, &omegas, &TailParams { alpha: LN_2 - 0.01, gamma: f64::INFINITY, delta: 0.1 }, &ns, 1000, 50)
            .unwrap();
        let empty = tail.product.points.iter().all(|p| p.n == 0 || p.value == 0.0);

        let hp = HyperbolicParams::new(0.6, 0.49).unwrap();
        let all_hyperbolic = omegas.iter().all(|w| {
            (0..20).all(|i| {
                let rec = iterate_record(&f, w, &sample_point(&f, w, 0, i), 200, 0.1).unwrap();
                hyperbolic_times(&rec, &hp).times == (1..=200).collect::<Vec<_>>()
            })
        });

        let phi = |x: &[f64]| (TAU * x[0]).cos();
        let params = CorrelationParams::new((0..=10).collect(), 32, 10_000);
        let mut worst = 0;
        let mut mixed = true;
        for dir in [Direction::Future, Direction::Past] {
            let r = quenched_correlation(&f, &omegas[0], &phi, &phi, &params, dir).unwrap();
            match r.first_below_noise() {
                Some(n) if n <= 10 => worst = worst.max(n),
                _ => mixed = false,
            }
        }
        pass &= empty && all_hyperbolic && mixed;
        details.push(format!("eps {eps}: tail empty {empty}, every n hyperbolic {all_hyperbolic}, correlation below noise by n = {worst}"));
    }
    verdict("A2", pass, details.join("; "));
}

#[test]
fn a3_local_diffeomorphism() {
    let t = Instant::now();
    let eps = 0.05;
    let f = MapFamily::torus_nue(2, 0.5).unwrap();
    let omegas: Vec<_> = (3..19).map(|s| Realization::new(s, NoiseModel::ball(eps, 2).unwrap())).collect();
    let mut ns = vec![0];
    ns.extend(log_grid(1, 2000, 20));
    let tail = estimate_tail_measure(&f, &omegas, &TailParams { alpha: 0.5, gamma: f64::INFINITY, delta: 0.1 }, &ns, 1000, 2000).unwrap();
    let fit = fit_stretched_exp(&tail.product, &WindowPolicy::default());

    // the intermittent coordinate carries the slow correlations
    let phi = |x: &[f64]| (TAU * x[1]).cos();
    let params = CorrelationParams::new((0..=40).collect(), 64, 100_000);
    let series: Vec<DecaySeries> = omegas
        .iter()
        .map(|w| quenched_correlation(&f, w, &phi, &phi, &params, Direction::Future).unwrap().series)
        .collect();
    let (corr, ok) = median_envelope_upsilon(&series);

    let tail_ok = fit.as_ref().is_ok_and(|f| (0.8..=1.0).contains(&f.upsilon) && f.r2 > 0.95);
    verdict(
        "A3",
        tail_ok && corr >= 0.35,
        format!(
            "tail {}; correlation median upsilon {corr:.3} ({ok}/16 fits); {:.0}s",
            fit.as_ref().map(show).unwrap_or_else(|e| e.to_string()),
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn a4_viana() {
    let t = Instant::now();
    let eps = 1e-3;
    let (alpha, gamma, delta) = (0.01, 0.5, 0.05);
    let f = MapFamily::viana(16, 0.01, misiurewicz_parameter(), eps).unwrap();
    let omegas: Vec<_> = (0..4).map(|s| Realization::new(s, NoiseModel::interval(eps).unwrap())).collect();
    let horizon = 5000;
    let records: Vec<_> = omegas
        .iter()
        .flat_map(|w| (0..250).map(move |i| (w, i)))
        .map(|(w, i)| {
            let mut r = iterate_record(&f, w, &sample_point(&f, w, 0, i), horizon, delta).unwrap();
            r.points = None;
            r
        })
        .collect();
    // Pliss rate from the observed mean expansion
    let c_hat = records.iter().map(|r| r.log_inv_norm.iter().sum::<f64>() / horizon as f64).sum::<f64>() / records.len() as f64;
    let hp = HyperbolicParams::from_log_rate(c_hat / 2.0, 0.49).unwrap();
    let freq = hyperbolic_frequency(&records, &hp, alpha, gamma, 0.01).unwrap();
    drop(records);

    let mut ns = vec![0];
    ns.extend(log_grid(1, horizon as u64, 20));
    let tail = estimate_tail_measure(&f, &omegas, &TailParams { alpha, gamma, delta }, &ns, 250, horizon).unwrap();
    let fit = fit_stretched_exp(&tail.product, &WindowPolicy::default());
    let tail_ok = fit.as_ref().is_ok_and(|f| (0.3..=0.7).contains(&f.upsilon));
    verdict(
        "A4",
        freq.fraction_positive >= 0.99 && tail_ok,
        format!(
            "log lambda {:.3}: positive frequency on {:.1}% of {} eligible orbits (mean {:.4}); tail {}; {:.0}s",
            hp.log_lambda,
            100.0 * freq.fraction_positive,
            freq.eligible,
            freq.mean,
            fit.as_ref().map(show).unwrap_or_else(|e| e.to_string()),
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn a5_gmy_one_dimensional() {
    let doubling = MapFamily::doubling();
    let (p, d0, lambda, horizon) = (0.5 + 1.0 / 256.0, 1.0 / 128.0, 0.6, 14);
    let ball = ReferenceBall::new(p, d0, 0, 1.0).unwrap();
    let params = GmyParams::new(HyperbolicParams::new(lambda, 0.49).unwrap(), 1.0, 0.375);
    let mut worst_tail: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    let mut elements_match = true;
    for (eps, seed) in [(0.0, 1), (1e-3, 2), (1e-3, 3)] {
        let omega = Realization::new(seed, NoiseModel::interval(eps).unwrap());
        let part = construct_partition(&doubling, &omega, &ball, horizon, &params).unwrap();
        let oracle = dyadic_oracle(&omega, p, d0, lambda, horizon);
        elements_match &= part.elements.len() == oracle.len()
            && part.elements.iter().zip(&oracle).all(|(e, o)| e.r == o.2 && (e.left - o.0).abs() < 1e-12 && (e.right - o.1).abs() < 1e-12);
        worst_mass = worst_mass.max(part.mass_accounting_error());
        let ns: Vec<u64> = (0..=horizon as u64).collect();
        let tail = return_time_tail(std::slice::from_ref(&part), &ns).unwrap();
        for (pt, &n) in tail.per_omega[0].points.iter().zip(&ns) {
            let returned: f64 = oracle.iter().filter(|o| o.2 as u64 <= n).map(|o| o.1 - o.0).sum();
            worst_tail = worst_tail.max((pt.value - (1.0 - returned / (2.0 * d0))).abs());
        }
    }
    let doubling_ok = elements_match && worst_mass < 1e-9 && worst_tail < 1e-9;

    let eps = 1e-3;
    let f = MapFamily::unimodal(misiurewicz_parameter(), eps).unwrap();
    let probes: Vec<_> = (100..108).map(|s| Realization::new(s, NoiseModel::interval(eps).unwrap())).collect();
    let params = GmyParams::new(HyperbolicParams::from_log_rate(-0.2, 0.49).unwrap(), 0.01, 0.24);
    let search = BallSearch {
        centers: vec![1.0, -0.45, 1.25],
        radii: vec![0.1, 0.05, 0.02],
        max_lag: 10,
        k0: 2.0,
        samples: 400,
        probe_horizon: 200,
        coverage: 0.0,
    };
    let ball = find_reference_ball(&f, &probes, &params, &search).unwrap();
    let horizon = 36;
    let parts: Vec<_> = (200..204)
        .map(|s| construct_partition(&f, &Realization::new(s, NoiseModel::interval(eps).unwrap()), &ball, horizon, &params).unwrap())
        .collect();
    let gcd = check_gcd_condition(&parts).unwrap();
    let ns: Vec<u64> = (0..=horizon as u64).collect();
    let tail = return_time_tail(&parts, &ns).unwrap();
    let fit = fit_stretched_exp(&tail.mean, &return_tail_window());
    let unimodal_ok = parts.iter().all(|p| !p.elements.is_empty()) && gcd.determined && fit.as_ref().is_ok_and(|f| f.upsilon > 0.3);
    verdict(
        "A5",
        doubling_ok && unimodal_ok,
        format!(
            "doubling: elements match {elements_match}, mass error {worst_mass:.1e}, tail error {worst_tail:.1e}; unimodal ball ({:.3}, {:.3}, lag {}): {} elements, gcd {:?}, {}",
            ball.center,
            ball.delta0,
            ball.lag,
            parts.iter().map(|p| p.elements.len()).sum::<usize>(),
            gcd.gcd,
            fit.as_ref().map(show).unwrap_or_else(|e| e.to_string())
        ),
    );
}

#[test]
fn a6_tower_equivariance() {
    let ladder = [125, 250, 500, 1000];
    let mut defects_at_max = Vec::new();
    let mut sups = Vec::new();
    let mut monotone = true;
    for seed in 0..32 {
        let spec = TowerSpec::new(ReturnLaw::Geometric { p: 0.3, jitter: 0.5 }, seed, 80).unwrap();
        let tower = Tower::new(spec, -1000 - 82, 4).unwrap();
        let mut last = f64::INFINITY;
        for &nb in &ladder {
            let rho0 = equivariant_density(&tower, 0, nb, 0.05).unwrap();
            let rho1 = equivariant_density(&tower, 1, nb, 0.05).unwrap();
            let d = equivariance_defect(&tower, &rho0, &rho1).unwrap();
            monotone &= d < last;
            last = d;
            if nb == 1000 {
                sups.push(rho0.sup);
            }
        }
        defects_at_max.push(last);
    }
    let worst = defects_at_max.iter().cloned().fold(0.0, f64::max);
    let mean_sup = sups.iter().sum::<f64>() / sups.len() as f64;
    let spread = sups.iter().map(|s| (s / mean_sup - 1.0).abs()).fold(0.0, f64::max);
    verdict(
        "A6",
        worst < 0.01 && spread <= 0.2 && monotone,
        format!("max defect at N_back 1000: {worst:.2e}; sup within {:.1}% of mean {mean_sup:.3}; ladder decreasing {monotone}", 100.0 * spread),
    );
}

fn joint_tail_upsilon(law: ReturnLaw) -> (Option<StretchedExpFit>, u32, String) {
    let specs: Vec<TowerSpec> = (0..32).map(|s| TowerSpec::new(law.clone(), s, 60).unwrap()).collect();
    let horizon = 80u64;
    let overlaps: Vec<_> = specs.iter().map(|s| overlap_v(&Tower::new(s.clone(), 0, horizon as i64 + 2).unwrap(), 0, horizon as u32).unwrap()).collect();
    let ell0 = common_ell0(&overlaps).expect("aperiodic law");
    let params = JointTailParams {
        ns: (0..=horizon).collect(),
        samples: 2000,
        horizon,
        ell0,
        n_back: 200,
        laws: (PairLaw::Base, PairLaw::Base),
        window: WindowPolicy::default(),
    };
    let jt = joint_tail(&specs, &params).unwrap();
    let fit = jt.refit.clone().or(jt.fit.clone());
    let detail = format!("censored {:.3}, widened CI {}, {} traces checked", jt.censored_fraction, jt.widened_ci, jt.traces_checked);
    (fit, ell0, detail)
}

#[test]
fn a7_exponent_cascade() {
    let c = 2f64.exp();
    let (uniform, ell0_u, du) = joint_tail_upsilon(ReturnLaw::StretchedExp { c, gamma: 1.0, upsilon: 1.0 });
    let (nonuniform, ell0_n, dn) =
        joint_tail_upsilon(ReturnLaw::NonUniform { c, gamma: 1.0, upsilon: 1.0, weight: 0.1, onset_p: 0.1 });

    let params = TowerCorrelationParams { ns: (0..=40).collect(), n_back: 400, samples: 20_000, density_tolerance: 0.05 };
    let level0 = |_: f64, l: u32| if l == 0 { 1.0 } else { 0.0 };
    let series: Vec<DecaySeries> = (0..8)
        .map(|s| {
            let spec = TowerSpec::new(ReturnLaw::StretchedExp { c, gamma: 1.0, upsilon: 1.0 }, s, 60).unwrap();
            let (lo, hi) = correlation_fiber_range(&spec, &params);
            let tower = Tower::new(spec, lo, hi).unwrap();
            tower_correlation(&tower, &level0, &level0, &params, Direction::Future).unwrap().series
        })
        .collect();
    let (corr, ok) = median_envelope_upsilon(&series);

    let u_ok = uniform.as_ref().is_some_and(|f| f.upsilon >= 0.9);
    let n_ok = nonuniform.as_ref().is_some_and(|f| f.upsilon >= 0.45);
    let fmt = |f: &Option<StretchedExpFit>| f.as_ref().map(show).unwrap_or_else(|| "no fit".into());
    verdict(
        "A7",
        u_ok && n_ok && corr >= 0.4,
        format!(
            "uniform (l0 {ell0_u}): {} ({du}); non-uniform (l0 {ell0_n}): {} ({dn}); tower correlation median upsilon {corr:.3} ({ok}/8 fits)",
            fmt(&uniform),
            fmt(&nonuniform)
        ),
    );
}

#[test]
fn a8_convolution_threshold() {
    let gammas = [0.25, 0.5, 1.0, 2.0];
    let upsilons = [0.2, 0.4, 0.6, 0.8, 1.0];
    let mut violations = 0;
    let mut not_minimal = 0;
    let mut ks = Vec::new();
    for &g in &gammas {
        for &u in &upsilons {
            let k = min_convolution_k(1.0, g, u, 1000, 100_000).unwrap();
            if brute_convolution_violation(1.0, g, u, k.k, 1000).is_some() {
                violations += 1;
            }
            if k.k > 0 && brute_convolution_violation(1.0, g, u, k.k - 1, 1000).is_none() {
                not_minimal += 1;
            }
            ks.push(k.k);
        }
    }
    verdict(
        "A8",
        violations == 0 && not_minimal == 0,
        format!("20 grid points, {violations} violations up to p = 1000, {not_minimal} non-minimal K; K in [{}, {}]", ks.iter().min().unwrap(), ks.iter().max().unwrap()),
    );
}

#[test]
fn a9_g0_machinery() {
    let params = EnvelopeParams::new(0.5, 0.5, 0.5).unwrap();
    let grid: Vec<u64> = (0..=200).collect();
    let report = extract_g0(&envelope_field(1000, &grid, &params, 5), &params).unwrap();
    let resolved: Vec<_> = report.tail.points.iter().filter(|p| !p.censored).collect();
    let worst = resolved.iter().map(|p| p.value / params.threshold(p.n)).fold(0.0, f64::max);

    let p = 0.2;
    let (field, _) = geometric_onset_field(p, 1000, &grid, &params, 5).unwrap();
    let report = extract_g0(&field, &params).unwrap();
    let ks = ks_distance_discrete(&report.resolved_values(), |k| 1.0 - (1.0 - p).powi(k as i32 + 1), 200);
    verdict(
        "A9",
        worst <= 1.0 && ks < 0.05,
        format!("envelope field: max P(g0 > n) / threshold {worst:.3} over {} resolved n; geometric onset KS {ks:.4}", resolved.len()),
    );
}

const A10_CONFIGS: &[(&str, &str)] = &[
    ("orbit-dump", include_str!("../configs/orbit_dump_unimodal.toml")),
    ("tail-decay", include_str!("../configs/tail_decay_torus.toml")),
    ("hyperbolic-freq", include_str!("../configs/hyperbolic_freq_viana.toml")),
    ("gmy-build", include_str!("../configs/gmy_doubling.toml")),
    ("tower-sim", include_str!("../configs/tower_geometric.toml")),
    ("coupling-sim", include_str!("../configs/coupling_nonuniform.toml")),
    ("correlation-decay", include_str!("../configs/correlation_tower.toml")),
    ("correlation-decay", include_str!("../configs/correlation_doubling.toml")),
    ("convolution-K", include_str!("../configs/convolution_k.toml")),
    ("g0-extract", include_str!("../configs/g0_geometric.toml")),
];

fn csv_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "csv") {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn a10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let mut files = 0;
    for (i, (kind, text)) in A10_CONFIGS.iter().enumerate() {
        let kind: ExperimentKind = kind.parse().unwrap();
        let runs: Vec<_> = [1, 4, 16]
            .iter()
            .map(|&w| {
                let out = tmp.path().join(format!("{i}_{w}"));
                run_experiment(kind, text, &RunOptions { workers: w, ..RunOptions::new(&out) }).unwrap();
                csv_bytes(&out)
            })
            .collect();
        files += runs[0].len();
        if runs[0].is_empty() || runs[1] != runs[0] || runs[2] != runs[0] {
            differing.push(format!("{kind}"));
        }
    }
    verdict(
        "A10",
        differing.is_empty(),
        format!("{} runs x workers 1/4/16, {files} CSV files compared; differing: {differing:?}", A10_CONFIGS.len()),
    );
}
