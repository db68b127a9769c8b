//! Noise laws and counter-based noise realizations.
//!
//! A realization is a bi-infinite sequence of parameters `t_j`, `j` in Z.
//! Parameters are never stored: `t_j` is a pure function of `(seed, j)`, so
//! the shift and its inverse are O(1) and any worker can regenerate any index.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Result};

/// A single noise parameter `t` in `T`, a subset of `R^d`.
pub type NoiseParam = SmallVec<[f64; 4]>;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key of the stream belonging to index `index` of the sequence `seed`.
#[inline]
pub fn stream_key(seed: u64, index: i64) -> u64 {
    let i = (index as u64).wrapping_mul(GOLDEN).wrapping_add(0x632b_e59b_d9b4_e019);
    mix64(seed ^ mix64(i))
}

/// Derives an independent seed for sub-task `i` of kind `tag`.
pub fn sub_seed(seed: u64, tag: u64, i: u64) -> u64 {
    mix64(mix64(seed ^ tag.wrapping_mul(GOLDEN)) ^ i.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Hashes a string tag into a `u64`, for use with [`sub_seed`].
pub fn tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[inline]
fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-mode generator: output `k` is `mix64(key + k * GOLDEN)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn for_task(seed: u64, tag: u64, i: u64) -> Self {
        Self::new(sub_seed(seed, tag, i))
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Support of the noise law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum NoiseShape {
    /// Uniform on `[-eps, eps]`.
    Interval,
    /// Uniform on the closed Euclidean ball of radius `eps` in `R^dim`.
    Ball { dim: usize },
}

/// Noise law `theta_eps` on `T = [-eps, eps]` or `B_eps(0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    epsilon: f64,
    #[serde(flatten)]
    shape: NoiseShape,
}

impl NoiseModel {
    pub fn interval(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, NoiseShape::Interval)
    }

    pub fn ball(epsilon: f64, dim: usize) -> Result<Self> {
        Self::new(epsilon, NoiseShape::Ball { dim })
    }

    pub fn new(epsilon: f64, shape: NoiseShape) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return invalid(format!("noise level must be finite and >= 0, got {epsilon}"));
        }
        if let NoiseShape::Ball { dim } = shape {
            if dim == 0 {
                return invalid("noise ball dimension must be positive");
            }
        }
        Ok(Self { epsilon, shape })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shape(&self) -> NoiseShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        match self.shape {
            NoiseShape::Interval => 1,
            NoiseShape::Ball { dim } => dim,
        }
    }

    /// Constant `D` with `theta(J) <= D |J| / eps` for every interval `J`
    /// (for a ball: intervals along one coordinate of the marginal).
    pub fn density_bound(&self) -> f64 {
        match self.shape {
            NoiseShape::Interval => 0.5,
            NoiseShape::Ball { dim } => {
                // eps times the peak of the 1-D marginal; c_{d+2} = c_d (d+2)/(d+1)
                let (mut d, mut c) = if dim % 2 == 1 { (1, 0.5) } else { (2, 2.0 / std::f64::consts::PI) };
                while d < dim {
                    c *= (d + 2) as f64 / (d + 1) as f64;
                    d += 2;
                }
                c
            }
        }
    }

    /// `theta(J)` for the interval law and `J = [lo, hi]`.
    pub fn interval_probability(&self, lo: f64, hi: f64) -> Result<f64> {
        if self.shape != NoiseShape::Interval {
            return invalid("interval probability needs the interval noise law");
        }
        if self.epsilon == 0.0 {
            return Ok(if lo <= 0.0 && 0.0 <= hi { 1.0 } else { 0.0 });
        }
        let a = lo.max(-self.epsilon);
        let b = hi.min(self.epsilon);
        Ok(((b - a) / (2.0 * self.epsilon)).max(0.0))
    }

    /// Draws one parameter. Ball draws use rejection from the enclosing cube.
    pub fn sample(&self, rng: &mut CounterRng) -> NoiseParam {
        let eps = self.epsilon;
        match self.shape {
            NoiseShape::Interval => smallvec::smallvec![eps * (2.0 * rng.uniform() - 1.0)],
            NoiseShape::Ball { dim } => loop {
                let v: NoiseParam = (0..dim).map(|_| 2.0 * rng.uniform() - 1.0).collect();
                if v.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                    return v.into_iter().map(|c| eps * c).collect();
                }
            },
        }
    }
}

/// A realization `omega`, seen through the shift `sigma^offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    seed: u64,
    offset: i64,
    model: NoiseModel,
}

impl Realization {
    pub fn new(seed: u64, model: NoiseModel) -> Self {
        Self { seed, offset: 0, model }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    /// `omega_j`, the parameter used at step `j` (any sign).
    pub fn parameter_at(&self, j: i64) -> NoiseParam {
        let mut rng = CounterRng::new(stream_key(self.seed, self.offset + j));
        self.model.sample(&mut rng)
    }

    /// `sigma^j(omega)`; negative `j` gives the inverse shift.
    pub fn shift(&self, j: i64) -> Self {
        Self { offset: self.offset + j, ..*self }
    }

    /// The same realization with a different noise level, sharing the stream.
    pub fn with_model(&self, model: NoiseModel) -> Self {
        Self { model, ..*self }
    }
}
