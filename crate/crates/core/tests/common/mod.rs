//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use quenched::hyperbolic::HyperbolicParams;
use quenched::noise::Realization;
use quenched::orbit::TimeValue;

struct Dyadic {
    x: f64,
    n: usize,
}

/// `f^n(x) = 2^n x + S_n mod 1` with `S_{n+1} = 2 S_n + t_n`, so the preimages
/// of `p` are `(p + k - S_n) / 2^n` and every piece is affine with slope `2^n`.
pub fn dyadic_oracle(omega: &Realization, p: f64, d0: f64, lambda: f64, horizon: usize) -> Vec<(f64, f64, usize)> {
    let (lo, hi) = (p - d0, p + d0);
    let tol = 1e-12 * 2.0 * d0;
    let mut s = 0.0f64;
    let mut chosen: Vec<Dyadic> = Vec::new();
    for n in 1..=horizon {
        s = (2.0 * s + omega.parameter_at(n as i64 - 1)[0]).rem_euclid(1.0);
        let scale = (n as f64).exp2();
        let k0 = (scale * lo - p + s).ceil() as i64;
        let k1 = (scale * hi - p + s).floor() as i64;
        for k in k0..=k1 {
            let x = (p + k as f64 - s) / scale;
            if x <= lo || x >= hi || chosen.iter().any(|e| (x - e.x).abs() < d0 / (e.n as f64).exp2()) {
                continue;
            }
            let (u0, u1) = (x - 2.0 * d0 / scale, x + 2.0 * d0 / scale);
            if u0 < lo - tol || u1 > hi + tol {
                continue;
            }
            let hit = chosen.iter().any(|e| {
                let rho = d0 * (1.0 + lambda.powf(0.5 * (n - e.n) as f64));
                let w = if n == e.n { 2.0 * d0 } else { rho } / (e.n as f64).exp2();
                e.x - w < u1 - tol && u0 + tol < e.x + w
            });
            if !hit {
                chosen.push(Dyadic { x, n });
            }
        }
    }
    let mut out: Vec<(f64, f64, usize)> =
        chosen.iter().map(|e| (e.x - d0 / (e.n as f64).exp2(), e.x + d0 / (e.n as f64).exp2(), e.n)).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}


/// Hyperbolic times straight from the definition: every window `j = n-k..n-1`
/// of every `n`, summed right to left.
pub fn brute_hyperbolic_times(l: &[f64], d: &[f64], p: &HyperbolicParams) -> Vec<usize> {
    let mut out = Vec::new();
    'n: for n in 1..=l.len() {
        let mut s = 0.0;
        for k in 1..=n {
            s += l[n - k];
            if s > k as f64 * p.log_lambda || (!d.is_empty() && d[n - k] > p.b * k as f64 * -p.log_lambda) {
                continue 'n;
            }
        }
        out.push(n);
    }
    out
}

/// Least `N` such that every average over `[0, m)`, `N <= m <= n`, is at most `threshold`.
pub fn brute_first_time(seq: &[f64], threshold: f64) -> TimeValue {
    let n = seq.len();
    let ok: Vec<bool> = (1..=n).map(|m| seq[..m].iter().sum::<f64>() / m as f64 <= threshold).collect();
    let mut big_n = n + 1;
    while big_n > 1 && ok[big_n - 2] {
        big_n -= 1;
    }
    if n > 0 && big_n == n + 1 {
        TimeValue::ExceedsHorizon
    } else {
        TimeValue::At(big_n as u64)
    }
}

/// `(b * b)_p / b_p` for `b_n = 1{n >= k} C exp(-gamma n^upsilon)`, every
/// term formed in log space so that nothing underflows.
pub fn brute_convolution_ratio(c: f64, gamma: f64, upsilon: f64, k: u64, p: u64) -> f64 {
    let lb = |n: u64| c.ln() - gamma * (n as f64).powf(upsilon);
    if p < 2 * k {
        return 0.0;
    }
    (k..=p - k).map(|i| (lb(i) + lb(p - i) - lb(p)).exp()).sum()
}

/// First `p <= horizon` where `(b * b)_p > b_p`, with a relative slack for rounding.
pub fn brute_convolution_violation(c: f64, gamma: f64, upsilon: f64, k: u64, horizon: u64) -> Option<u64> {
    (0..=horizon).find(|&p| brute_convolution_ratio(c, gamma, upsilon, k, p) > 1.0 + 1e-12)
}

/// Dyadic rationals in `[lo, hi]` with denominator 64: all partial sums of
/// a few thousand of them are exact in f64.
pub fn dyadic(rng: &mut quenched::noise::CounterRng, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo * 64.0).ceil() as i64, (hi * 64.0).floor() as i64);
    (a + rng.below((b - a + 1) as usize) as i64) as f64 / 64.0
}
