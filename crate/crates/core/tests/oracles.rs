//! Module behaviour against independent oracles: finite differences, brute
//! force reclassification, exhaustive enumeration and closed forms.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use quenched::coupling::{check_trace, coupling_trace, min_convolution_k};
use quenched::gmy::{construct_partition, find_reference_ball, BallSearch, GmyParams, ReferenceBall};
use quenched::hyperbolic::{build_preball, hyperbolic_times, HyperbolicParams};
use quenched::mapcore::{misiurewicz_parameter, MapFamily, PhasePoint};
use quenched::noise::{tag, CounterRng, NoiseModel, Realization};
use quenched::orbit::{deep_return_profile, iterate_record, tail_membership, DeepReturnParams};
use quenched::stats::tail::sample_point;
use quenched::stats::{fit_stretched_exp, DecaySeries, Direction, WindowPolicy};
use quenched::tower::{
    correlation_fiber_range, project_to_m, tower_correlation, Cell, GmyTower, ReturnLaw, Tower, TowerCorrelationParams,
    TowerPoint, TowerSpec,
};

mod common;
use common::brute_first_time;

#[test]
fn viana_jacobian_matches_central_differences() {
    let f = MapFamily::viana(16, 0.01, misiurewicz_parameter(), 1e-3).unwrap();
    let mut rng = CounterRng::for_task(3, tag("fd"), 0);
    let t = [0.0];
    for _ in 0..200 {
        let x = [rng.uniform_in(0.01, 0.99), rng.uniform_in(-1.5, 1.5)];
        if x[1].abs() < 1e-3 {
            continue;
        }
        let jac = f.jacobian(&x).unwrap();
        let h = 1e-7;
        for col in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[col] += h;
            xm[col] -= h;
            let (fp, fm) = (f.eval(&t, &xp).unwrap(), f.eval(&t, &xm).unwrap());
            for row in 0..2 {
                let mut d = fp[row] - fm[row];
                if row == 0 {
                    // the circle coordinate wraps
                    d -= d.round();
                }
                let fd = d / (2.0 * h);
                let exact = jac.get(row, col);
                assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "({row},{col}) at {x:?}: {fd} vs {exact}");
            }
        }
    }
}

#[test]
fn viana_circle_coordinate_ignores_noise() {
    let eps = 1e-3;
    let f = MapFamily::viana(16, 0.01, misiurewicz_parameter(), eps).unwrap();
    let s0 = 3.0 / 1024.0 + 1.0 / 7.0;
    let x0 = PhasePoint::new(&[s0, 0.3]);
    for seed in 0..3 {
        let w = Realization::new(seed, NoiseModel::interval(eps).unwrap());
        let rec = iterate_record(&f, &w, &x0, 12, 0.05).unwrap();
        let mut s = s0;
        for p in rec.points.as_ref().unwrap() {
            assert!((p[0] - s).abs() < 1e-9, "{} vs {s}", p[0]);
            s = (16.0 * s).rem_euclid(1.0);
        }
    }
}

#[test]
fn interval_noise_mean_obeys_clt_bound() {
    let eps = 0.01;
    let w = Realization::new(9, NoiseModel::interval(eps).unwrap());
    let n = 1_000_000;
    let mean = (0..n).map(|j| w.parameter_at(j)[0]).sum::<f64>() / n as f64;
    assert!(mean.abs() <= 2.0 * 3.0 * eps / (n as f64).sqrt(), "{mean}");
}

#[test]
fn tail_membership_matches_both_definitions() {
    let eps = 1e-3;
    let f = MapFamily::unimodal(misiurewicz_parameter(), eps).unwrap();
    let (alpha, gamma) = (0.1, 0.5);
    for i in 0..200 {
        let w = Realization::new(i % 4, NoiseModel::interval(eps).unwrap());
        let rec = iterate_record(&f, &w, &sample_point(&f, &w, 1, i), 60, 0.05).unwrap();
        let e = brute_first_time(&rec.log_inv_norm, -alpha);
        let r = brute_first_time(&rec.log_trunc_dist, gamma);
        for n in 0..=60usize {
            let brute = e.exceeds(n as u64) || r.exceeds(n as u64);
            assert_eq!(tail_membership(&rec, alpha, gamma, n).unwrap(), brute, "sample {i}, n {n}");
        }
    }
}

#[test]
fn shell_profile_matches_reclassification() {
    let eps = 1e-3;
    let f = MapFamily::unimodal(misiurewicz_parameter(), eps).unwrap();
    let w = Realization::new(2, NoiseModel::interval(eps).unwrap());
    let rec = iterate_record(&f, &w, &PhasePoint::scalar(0.123), 1000, 0.05).unwrap();
    let params = DeepReturnParams { eta: 0.05, epsilon: eps, h1_alpha: 0.01, h1_lambda: 2.0 };
    let prof = deep_return_profile(&f, &rec, &params).unwrap();
    let root = eps.sqrt();
    let mut sum = 0u64;
    for (j, p) in rec.points.as_ref().unwrap()[..1000].iter().enumerate() {
        let ax = p[0].abs();
        let r = (1..400u32).find(|&r| root * (-(r as f64)).exp() < ax && ax < root * (-(r as f64 - 1.0)).exp()).unwrap_or(0);
        assert_eq!(prof.r[j], r, "step {j}, x = {}", p[0]);
        if r as f64 >= prof.threshold {
            sum += r as u64;
        }
    }
    assert_eq!(prof.sum_g, sum);
}

#[test]
fn shell_of_a_single_deep_visit() {
    let eps: f64 = 1e-4;
    for r in 1..12u32 {
        let x = eps.sqrt() * (-(r as f64) + 0.5).exp();
        assert_eq!(quenched::orbit::shell_index(x, eps), r);
    }
}

#[test]
fn unimodal_preball_contracts_at_half_rate() {
    let eps = 1e-3;
    let f = MapFamily::unimodal(misiurewicz_parameter(), eps).unwrap();
    let params = HyperbolicParams::from_log_rate(-0.2, 0.49).unwrap();
    let mut distortions = Vec::new();
    for i in 0..20 {
        let w = Realization::new(5, NoiseModel::interval(eps).unwrap());
        let x = sample_point(&f, &w, 2, i);
        let rec = iterate_record(&f, &w, &x, 80, 0.01).unwrap();
        let times = hyperbolic_times(&rec, &params).times;
        for &n in times.iter().filter(|&&n| n >= 5).take(3) {
            let pb = build_preball(&f, &w, &x, n, 0.05, &params).unwrap();
            assert!(pb.contraction_ratio <= 1.0 + 1e-9, "n {n}: ratio {}", pb.contraction_ratio);
            distortions.push(pb.distortion);
        }
    }
    assert!(!distortions.is_empty());
}

#[test]
fn found_ball_is_covered_under_every_probe() {
    let eps = 1e-3;
    let f = MapFamily::unimodal(misiurewicz_parameter(), eps).unwrap();
    let probes: Vec<_> = (100..108).map(|s| Realization::new(s, NoiseModel::interval(eps).unwrap())).collect();
    let params = GmyParams::new(HyperbolicParams::from_log_rate(-0.2, 0.49).unwrap(), 0.01, 0.24);
    let search = BallSearch {
        centers: vec![1.0, -0.45, 1.25],
        radii: vec![0.1, 0.05, 0.02],
        max_lag: 10,
        k0: 2.0,
        samples: 100,
        probe_horizon: 200,
        coverage: 0.0,
    };
    let ball = find_reference_ball(&f, &probes, &params, &search).unwrap();
    // recheck one probe at a time
    for w in &probes {
        let again = find_reference_ball(&f, std::slice::from_ref(w), &params, &search).unwrap();
        let order = |b: &ReferenceBall| {
            let r = search.radii.iter().position(|&d| d == b.delta0).unwrap();
            let c = search.centers.iter().position(|&c| c == b.center).unwrap();
            (r, b.lag, c)
        };
        assert!(order(&again) <= order(&ball), "probe {} finds {again:?} after {ball:?}", w.seed());
    }
}

#[test]
fn doubling_partition_meets_expansion_bound() {
    let f = MapFamily::doubling();
    let ball = ReferenceBall::new(0.5 + 1.0 / 256.0, 1.0 / 128.0, 0, 1.0).unwrap();
    let params = GmyParams::new(HyperbolicParams::new(0.6, 0.49).unwrap(), 1.0, 0.375);
    for seed in 0..3 {
        let p = construct_partition(&f, &Realization::new(seed, NoiseModel::interval(1e-3).unwrap()), &ball, 14, &params).unwrap();
        let bound = ball.k0 * params.hyper.lambda().powf((p.r0 as f64 - ball.lag as f64) / 2.0);
        assert!(p.kappa <= bound, "kappa {} > {bound}", p.kappa);
        for e in &p.elements {
            assert!((e.kappa - (-(e.r as f64) * std::f64::consts::LN_2).exp()).abs() < 1e-12);
        }
    }
}

#[test]
fn gmy_tower_semiconjugates_to_the_doubling_map() {
    let f = MapFamily::doubling();
    let ball = ReferenceBall::new(0.5 + 1.0 / 256.0, 1.0 / 128.0, 0, 1.0).unwrap();
    let params = GmyParams::new(HyperbolicParams::new(0.6, 0.49).unwrap(), 1.0, 0.375);
    let w = Realization::new(4, NoiseModel::interval(1e-3).unwrap());
    let tower = GmyTower::new(&f, w, ball, 16, params, -12, 2).unwrap();
    let report = project_to_m(&tower, 10_000, 10, 0.5, &|x| (TAU * x).cos()).unwrap();
    assert!(report.samples > 9_000);
    assert!(report.semiconjugacy_error <= 1e-9);
    assert!(report.lifted_holder.is_finite());
}

#[test]
fn one_step_tower_mixes_immediately() {
    let spec = TowerSpec::new(ReturnLaw::Fixed { r: 1 }, 0, 1).unwrap().with_branches(16).unwrap();
    let params = TowerCorrelationParams { ns: (0..=5).collect(), n_back: 16, samples: 20_000, density_tolerance: 0.05 };
    let (lo, hi) = correlation_fiber_range(&spec, &params);
    let tower = Tower::new(spec, lo, hi).unwrap();
    let phi = |x: f64, _: u32| x;
    let r = tower_correlation(&tower, &phi, &phi, &params, Direction::Future).unwrap();
    // Var(x) = 1/12, then a factor 1/16 per step of the full-branch map
    let p = &r.series.points;
    assert!((p[0].value - 1.0 / 12.0).abs() < 4.0 * p[0].stderr);
    assert!((p[1].value - 1.0 / 192.0).abs() < 4.0 * p[1].stderr, "{:?}", p[1]);
    for q in &p[2..] {
        assert!(q.value < 4.0 * q.stderr, "n {}: {} +- {}", q.n, q.value, q.stderr);
    }
}

/// Returns of a base point on the two-cell tower `R = 2` on `[0, 1/2)`,
/// `R = 3` on `[1/2, 1)` with doubling branches: read off its binary digits.
fn level_zero_times(bits: u32, nbits: u32) -> BTreeSet<u64> {
    let mut t = 0u64;
    let mut out = BTreeSet::from([0]);
    for k in (0..nbits).rev() {
        t += if bits >> k & 1 == 0 { 2 } else { 3 };
        out.insert(t);
    }
    out
}

/// Every admissible sequence of stopping times, by exhaustive search.
fn enumerate_traces(zx: &BTreeSet<u64>, zy: &BTreeSet<u64>, ell0: u64, horizon: u64) -> Vec<(Vec<u64>, Option<u64>)> {
    fn go(
        zx: &BTreeSet<u64>,
        zy: &BTreeSet<u64>,
        ell0: u64,
        horizon: u64,
        taus: &mut Vec<u64>,
        out: &mut Vec<(Vec<u64>, Option<u64>)>,
    ) {
        let prev = taus.last().copied().unwrap_or(0);
        let own = if taus.len() % 2 == 0 { zx } else { zy };
        let mut any = false;
        for tau in prev + ell0..=horizon {
            // tau must be the first return of its point after the gap
            if !own.contains(&tau) || (prev + ell0..tau).any(|s| own.contains(&s)) {
                continue;
            }
            any = true;
            taus.push(tau);
            if taus.len() >= 2 && zx.contains(&tau) && zy.contains(&tau) {
                out.push((taus.clone(), Some(tau)));
            } else {
                go(zx, zy, ell0, horizon, taus, out);
            }
            taus.pop();
        }
        if !any {
            out.push((taus.clone(), None));
        }
    }
    let mut out = Vec::new();
    go(zx, zy, ell0, horizon, &mut Vec::new(), &mut out);
    out
}

#[test]
fn two_branch_traces_match_enumeration() {
    let cells = vec![Cell { mass: 0.5, r: 2 }, Cell { mass: 0.5, r: 3 }];
    let spec = TowerSpec::new(ReturnLaw::Cells { cells }, 0, 3).unwrap();
    let horizon = 12;
    let tower = Tower::new(spec, 0, horizon as i64 + 4).unwrap();
    let nbits = 6;
    for bx in 0..1u32 << nbits {
        for by in 0..1u32 << nbits {
            let x = (bx as f64 + 0.5) / 64.0;
            let y = (by as f64 + 0.5) / 64.0;
            let (zx, zy) = (level_zero_times(bx, nbits), level_zero_times(by, nbits));
            for ell0 in 1..=3 {
                let trace = coupling_trace(&tower, &TowerPoint::base(x, 0), &TowerPoint::base(y, 0), ell0, horizon).unwrap();
                check_trace(&tower, &trace).unwrap();
                let all = enumerate_traces(&zx, &zy, ell0 as u64, horizon);
                assert_eq!(all.len(), 1, "stopping times are forced");
                assert_eq!((trace.taus.clone(), trace.t), all[0], "x {x}, y {y}, l0 {ell0}");
            }
        }
    }
}

#[test]
fn convolution_threshold_is_nonincreasing_in_gamma() {
    for upsilon in [0.3, 0.6, 0.9] {
        let ks: Vec<u64> = [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|&g| min_convolution_k(1.0, g, upsilon, 500, 100_000).unwrap().k).collect();
        assert!(ks.windows(2).all(|w| w[1] <= w[0]), "upsilon {upsilon}: {ks:?}");
    }
}

#[test]
fn noisy_stretched_exponential_is_recovered() {
    let ns: Vec<u64> = (0..=400).collect();
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut rng = CounterRng::for_task(21, tag("noisy_fit"), draw);
        let upsilon = 0.3 + 0.7 * rng.uniform();
        let gamma = 0.5 + rng.uniform();
        let eta: Vec<f64> = ns.iter().map(|_| rng.uniform_in(-0.05, 0.05)).collect();
        let s = DecaySeries::from_fn("noisy", &ns, |n| (-gamma * (n as f64).powf(upsilon)).exp() * (1.0 + eta[n as usize]));
        let fit = fit_stretched_exp(&s, &WindowPolicy::default()).unwrap();
        worst = worst.max((fit.upsilon - upsilon).abs());
    }
    assert!(worst <= 0.05, "worst exponent error {worst}");
}
