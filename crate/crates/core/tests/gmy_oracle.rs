//! Doubling partitions against closed-form dyadic bookkeeping.

use quenched::gmy::{construct_partition, return_time_tail, GmyParams, ReferenceBall};
use quenched::hyperbolic::HyperbolicParams;
use quenched::mapcore::MapFamily;
use quenched::noise::{NoiseModel, Realization};

mod common;
use common::dyadic_oracle;

fn compare(eps: f64, seed: u64, horizon: usize) {
    let f = MapFamily::doubling();
    let omega = Realization::new(seed, NoiseModel::interval(eps).unwrap());
    let (p, d0, lambda) = (0.5 + 1.0 / 256.0, 1.0 / 128.0, 0.6);
    let ball = ReferenceBall::new(p, d0, 0, 1.0).unwrap();
    let params = GmyParams::new(HyperbolicParams::new(lambda, 0.49).unwrap(), 1.0, 0.375);
    let part = construct_partition(&f, &omega, &ball, horizon, &params).unwrap();
    let oracle = dyadic_oracle(&omega, p, d0, lambda, horizon);
    assert_eq!(part.elements.len(), oracle.len(), "element count, eps {eps}");
    for (e, o) in part.elements.iter().zip(&oracle) {
        assert_eq!(e.r, o.2);
        assert!((e.left - o.0).abs() < 1e-12 && (e.right - o.1).abs() < 1e-12, "{e:?} vs {o:?}");
    }
    assert!(part.mass_accounting_error() < 1e-9);
    let ns: Vec<u64> = (0..=horizon as u64).collect();
    let tail = return_time_tail(std::slice::from_ref(&part), &ns).unwrap();
    for (pt, &n) in tail.per_omega[0].points.iter().zip(&ns) {
        let returned: f64 = oracle.iter().filter(|o| o.2 as u64 <= n).map(|o| o.1 - o.0).sum();
        assert!((pt.value - (1.0 - returned / (2.0 * d0))).abs() < 1e-9, "n = {n}");
    }
}

#[test]
fn noiseless_doubling_matches_dyadic_oracle() {
    compare(0.0, 1, 14);
}

#[test]
fn noisy_doubling_matches_dyadic_oracle() {
    for seed in [2, 3, 4] {
        compare(1e-3, seed, 14);
    }
}
