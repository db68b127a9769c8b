//! Kolmogorov-Smirnov distances against reference distributions.

/// `sup_x |F_n(x) - F(x)|` for a continuous reference CDF.
pub fn ks_distance_continuous(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// `sup_k |F_n(k) - F(k)|` over the integers `0..=k_max` for an integer-valued law.
pub fn ks_distance_discrete(samples: &[u64], cdf: impl Fn(u64) -> f64, k_max: u64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_unstable();
    let n = xs.len() as f64;
    let mut idx = 0;
    let mut worst = 0.0f64;
    for k in 0..=k_max {
        while idx < xs.len() && xs[idx] <= k {
            idx += 1;
        }
        worst = worst.max((idx as f64 / n - cdf(k)).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_grid_has_small_distance() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_distance_continuous(&xs, |x| x.clamp(0.0, 1.0)) <= 0.0005 + 1e-12);
    }

    #[test]
    fn discrete_point_mass() {
        let xs = vec![2u64; 10];
        let d = ks_distance_discrete(&xs, |k| if k >= 2 { 1.0 } else { 0.0 }, 5);
        assert_eq!(d, 0.0);
    }
}
