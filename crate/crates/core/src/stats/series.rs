use serde::{Deserialize, Serialize};

/// One grid point of a decay series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub n: u64,
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    pub censored: bool,
}

/// An `n`-indexed nonnegative series: a tail measure, a survival function or
/// a correlation modulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    pub series_id: String,
    pub omega_id: i64,
    pub points: Vec<SeriesPoint>,
}

impl DecaySeries {
    pub fn new(series_id: impl Into<String>, omega_id: i64) -> Self {
        Self { series_id: series_id.into(), omega_id, points: Vec::new() }
    }

    /// Noiseless series `f(n)` over the grid.
    pub fn from_fn(series_id: impl Into<String>, ns: &[u64], f: impl Fn(u64) -> f64) -> Self {
        let mut s = Self::new(series_id, 0);
        for &n in ns {
            s.push(n, f(n), 0.0, 0, false);
        }
        s
    }

    pub fn push(&mut self, n: u64, value: f64, stderr: f64, samples: u64, censored: bool) {
        self.points.push(SeriesPoint { n, value, stderr, samples, censored });
    }

    pub fn ns(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.n).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn value_at(&self, n: u64) -> Option<f64> {
        self.points.iter().find(|p| p.n == n).map(|p| p.value)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].value <= w[0].value)
    }

    pub fn all_zero(&self) -> bool {
        self.points.iter().all(|p| p.value == 0.0)
    }

    /// Running maximum from the right over the points resolved above
    /// `noise_sigmas` standard errors; unresolved tails are kept as they are.
    pub fn upper_envelope(&self, noise_sigmas: f64) -> DecaySeries {
        let mut out = self.clone();
        out.series_id = format!("{}_envelope", self.series_id);
        let mut best: Option<SeriesPoint> = None;
        for p in out.points.iter_mut().rev() {
            if p.value > noise_sigmas * p.stderr && best.is_none_or(|b| p.value >= b.value) {
                best = Some(*p);
            }
            if let Some(b) = best {
                p.value = b.value;
                p.stderr = b.stderr;
            }
        }
        out
    }

    /// Pointwise average of series sharing a grid; stderr combines the
    /// spread across series with their own standard errors.
    pub fn average(series_id: impl Into<String>, parts: &[DecaySeries]) -> Option<DecaySeries> {
        let first = parts.first()?;
        let k = parts.len() as f64;
        let mut out = DecaySeries::new(series_id, -1);
        for (i, p0) in first.points.iter().enumerate() {
            let vals: Vec<f64> = parts.iter().map(|s| s.points[i].value).collect();
            let mean = vals.iter().sum::<f64>() / k;
            let var_between = if parts.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            let var_within: f64 = parts.iter().map(|s| s.points[i].stderr.powi(2)).sum::<f64>() / (k * k);
            let stderr = if parts.len() > 1 { (var_between / k).sqrt() } else { var_within.sqrt() };
            let samples = parts.iter().map(|s| s.points[i].samples).sum();
            let censored = parts.iter().any(|s| s.points[i].censored);
            out.push(p0.n, mean, stderr, samples, censored);
        }
        Some(out)
    }
}

/// Integer grid `lo, lo+1, ..., hi` thinned to roughly log spacing with
/// `per_decade` points per decade (always including every n below `per_decade`).
pub fn log_grid(lo: u64, hi: u64, per_decade: usize) -> Vec<u64> {
    let mut out = Vec::new();
    let lo = lo.max(1);
    let mut n = lo;
    let ratio = 10f64.powf(1.0 / per_decade as f64);
    while n <= hi {
        out.push(n);
        let next = ((n as f64) * ratio).floor() as u64;
        n = next.max(n + 1);
    }
    out
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct Acc {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl Acc {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count > 0 {
            (self.variance() / self.count as f64).sqrt()
        } else {
            0.0
        }
    }

    /// Chan's parallel combination; used with a fixed merge order.
    pub fn merge(&self, other: &Acc) -> Acc {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.count as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * (self.count as f64 * other.count as f64) / n as f64;
        Acc { count: n, mean, m2 }
    }
}
