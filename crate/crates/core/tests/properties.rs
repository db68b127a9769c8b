//! Invariants checked over generated inputs.

use proptest::prelude::*;

use quenched::coupling::{check_trace, coupling_trace, min_convolution_k};
use quenched::gmy::{construct_partition, gcd_rewrite, GmyParams, ReferenceBall};
use quenched::hyperbolic::{hyperbolic_times_of, HyperbolicParams};
use quenched::mapcore::{dist_delta, MapFamily};
use quenched::noise::{sub_seed, CounterRng, NoiseModel, Realization};
use quenched::orbit::{expansion_time_of, recurrence_time_of};
use quenched::stats::{fit_stretched_exp, kaplan_meier, DecaySeries, Observation, WindowPolicy};
use quenched::tower::{equivariant_density, ReturnLaw, Tower, TowerPoint, TowerSpec};

mod common;
use common::{brute_convolution_violation, brute_first_time, brute_hyperbolic_times};

fn dyadics(lo: i32, hi: i32, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((lo..=hi).prop_map(|k| k as f64 / 64.0), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fast_scan_equals_definition(
        l in dyadics(-96, 64, 1..80),
        depths in dyadics(0, 384, 80..81),
        sparse in prop::collection::vec(any::<bool>(), 80),
        rate in prop::sample::select(vec![-0.0625, -0.125, -0.5, -1.0]),
        b in prop::sample::select(vec![0.25, 0.5, 1.0]),
    ) {
        let d: Vec<f64> = depths.iter().zip(&sparse).take(l.len()).map(|(&x, &s)| if s { x } else { 0.0 }).collect();
        let p = HyperbolicParams::from_log_rate(rate, b).unwrap();
        prop_assert_eq!(hyperbolic_times_of(&l, &d, &p), brute_hyperbolic_times(&l, &d, &p));
        prop_assert_eq!(hyperbolic_times_of(&l, &[], &p), brute_hyperbolic_times(&l, &[], &p));
    }

    #[test]
    fn first_times_equal_definition(seq in dyadics(-128, 128, 0..120), k in -32i32..32) {
        let t = k as f64 / 64.0;
        prop_assert_eq!(expansion_time_of(&seq, -t), brute_first_time(&seq, t));
        prop_assert_eq!(recurrence_time_of(&seq, t), brute_first_time(&seq, t));
    }

    #[test]
    fn truncated_distance_is_in_unit_interval(dist in 0.0f64..2.0, delta in 0.001f64..1.0) {
        let v = dist_delta(dist, delta);
        prop_assert!(v <= 1.0 && v >= 0.0);
        prop_assert_eq!(v == 1.0, dist >= delta || dist == 1.0);
    }

    #[test]
    fn noise_is_a_pure_function_of_seed_and_index(seed in any::<u64>(), j in -10_000i64..10_000, k in -100i64..100) {
        let w = Realization::new(seed, NoiseModel::interval(0.1).unwrap());
        prop_assert_eq!(w.parameter_at(j), w.parameter_at(j));
        prop_assert_eq!(w.shift(k).parameter_at(j), w.parameter_at(j + k));
        prop_assert!(w.parameter_at(j)[0].abs() <= 0.1);
        let mut a = CounterRng::new(sub_seed(seed, 1, j as u64));
        let mut b = CounterRng::new(sub_seed(seed, 1, j as u64));
        prop_assert_eq!(a.uniform(), b.uniform());
    }

    #[test]
    fn kaplan_meier_is_a_survival_function(
        times in prop::collection::vec((0u64..40, any::<bool>()), 1..60),
    ) {
        let obs: Vec<Observation> = times.iter().map(|&(t, c)| if c { Observation::censored_at(t) } else { Observation::event(t) }).collect();
        let ns: Vec<u64> = (0..45).collect();
        let s = kaplan_meier(&obs, &ns, "km", 0);
        prop_assert!(s.points.iter().all(|p| (0.0..=1.0).contains(&p.value)));
        prop_assert!(s.points.windows(2).all(|w| w[1].value <= w[0].value + 1e-15));
        if times.iter().all(|t| !t.1) {
            for p in &s.points {
                let emp = times.iter().filter(|t| t.0 > p.n).count() as f64 / times.len() as f64;
                prop_assert!((p.value - emp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upper_envelope_dominates_and_decreases(
        vals in prop::collection::vec((0.0f64..1.0, 0.0f64..0.05), 1..50),
    ) {
        let mut s = DecaySeries::new("s", 0);
        for (n, &(v, e)) in vals.iter().enumerate() {
            s.push(n as u64, v, e, 100, false);
        }
        let env = s.upper_envelope(3.0);
        let resolved: Vec<bool> = vals.iter().map(|&(v, e)| v > 3.0 * e).collect();
        let first_unresolved_tail = resolved.iter().rposition(|&r| r).map_or(0, |i| i + 1);
        for (i, (a, b)) in env.points.iter().zip(&s.points).enumerate() {
            if i < first_unresolved_tail {
                prop_assert!(a.value >= b.value || !resolved[i]);
            } else {
                prop_assert_eq!(a.value, b.value);
            }
        }
        let head = &env.points[..first_unresolved_tail];
        prop_assert!(head.windows(2).all(|w| w[1].value <= w[0].value));
    }

    #[test]
    fn gcd_rewrite_factors_every_value(vals in prop::collection::vec(1usize..200, 1..10)) {
        let r = gcd_rewrite(&vals);
        let g = r.gcd.unwrap();
        prop_assert!(vals.iter().all(|v| v % g == 0));
        prop_assert!(r.rewrite.iter().all(|&(v, k)| v == g * k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tower_map_climbs_or_drops(p in 0.05f64..0.66, seed in 0u64..1000, x in 0.0f64..1.0, steps in 1u64..60) {
        let spec = TowerSpec::new(ReturnLaw::Geometric { p, jitter: 0.5 }, seed, 60).unwrap();
        let tower = Tower::new(spec, 0, 70).unwrap();
        let mut q = TowerPoint::base(x, 0);
        for _ in 0..steps {
            let next = tower.map(&q).unwrap();
            prop_assert_eq!(next.fiber, q.fiber + 1);
            prop_assert!(next.level == q.level + 1 || next.level == 0);
            if next.level == q.level + 1 {
                prop_assert_eq!(next.x, q.x);
            }
            prop_assert!(tower.is_valid(&next).unwrap());
            q = next;
        }
        prop_assert_eq!(tower.iterate(&TowerPoint::base(x, 0), steps).unwrap(), q);
    }

    #[test]
    fn equivariant_density_is_normalized(p in 0.1f64..0.76, seed in 0u64..1000) {
        let spec = TowerSpec::new(ReturnLaw::Geometric { p, jitter: 0.3 }, seed, 60).unwrap();
        let tower = Tower::new(spec, -300, 2).unwrap();
        let rho = equivariant_density(&tower, 0, 200, 0.05).unwrap();
        prop_assert!((rho.total() - 1.0).abs() < 1e-9, "{}", rho.total());
        prop_assert!(rho.min >= 0.0 && rho.sup >= rho.min);
    }

    #[test]
    fn coupling_traces_satisfy_their_definition(seed in 0u64..1000, x in 0.0f64..1.0, y in 0.0f64..1.0, ell0 in 1u32..5) {
        let law = ReturnLaw::StretchedExp { c: 2f64.exp(), gamma: 1.0, upsilon: 1.0 };
        let tower = Tower::new(TowerSpec::new(law, seed, 40).unwrap(), 0, 110).unwrap();
        let trace = coupling_trace(&tower, &TowerPoint::base(x, 0), &TowerPoint::base(y, 0), ell0, 100).unwrap();
        prop_assert!(check_trace(&tower, &trace).is_ok());
        prop_assert!(trace.taus.windows(2).all(|w| w[1] >= w[0] + ell0 as u64));
    }

    #[test]
    fn convolution_threshold_is_certified_and_minimal(g in 0.2f64..3.0, u in 0.2f64..1.0) {
        let k = min_convolution_k(1.0, g, u, 200, 100_000).unwrap();
        prop_assert!(brute_convolution_violation(1.0, g, u, k.k, 200).is_none());
        if k.k > 0 {
            prop_assert!(brute_convolution_violation(1.0, g, u, k.k - 1, 200).is_some());
        }
    }

    #[test]
    fn noiseless_fit_recovers_exponent(u in 0.2f64..1.0, g in 0.3f64..2.0) {
        let ns: Vec<u64> = (0..=300).collect();
        let s = DecaySeries::from_fn("law", &ns, |n| (-g * (n as f64).powf(u)).exp());
        let fit = fit_stretched_exp(&s, &WindowPolicy::default()).unwrap();
        prop_assert!((fit.upsilon - u).abs() < 0.01, "{} vs {u}", fit.upsilon);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn doubling_partitions_are_disjoint_and_account_for_mass(seed in 0u64..10_000, eps in 0.0f64..0.01) {
        let f = MapFamily::doubling();
        let ball = ReferenceBall::new(0.5 + 1.0 / 256.0, 1.0 / 128.0, 0, 1.0).unwrap();
        let params = GmyParams::new(HyperbolicParams::new(0.6, 0.49).unwrap(), 1.0, 0.375);
        let part = construct_partition(&f, &Realization::new(seed, NoiseModel::interval(eps).unwrap()), &ball, 12, &params).unwrap();
        prop_assert!(part.is_disjoint());
        prop_assert!(part.mass_accounting_error() < 1e-9);
        prop_assert!(part.elements.iter().all(|e| e.left >= ball.lo() && e.right <= ball.hi()));
    }
}
