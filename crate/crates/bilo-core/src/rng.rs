//! Counter-based pseudo-random numbers.
//!
//! Every random draw in the crate (weight init, observation noise, particle
//! sampling) goes through [`Rng`], a SplitMix64 generator evaluated as a pure
//! function of `(seed, counter)`. Runs are reproducible from the seed alone,
//! and independent streams are derived by hashing a stream tag into the seed.

/// SplitMix64 stream: `value(k) = mix(seed + (k+1) * GOLDEN)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    /// Cached second normal from Box-Muller.
    spare_normal: Option<f64>,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0, spare_normal: None }
    }

    /// Independent stream for a named purpose (noise, init, particles, ...).
    pub fn stream(seed: u64, tag: &str) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in tag.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Rng::new(mix(seed ^ h))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 high bits -> [0,1) with full double precision.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Poisson count by Knuth's product-of-uniforms method.
    ///
    /// Fine for the desk-scale means used here (< ~50); for large means the
    /// loop just gets proportionally longer.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        assert!(mean >= 0.0, "poisson mean must be non-negative");
        if mean == 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.uniform();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let a: Vec<u64> = (0..8).map(|_| Rng::new(7).next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| Rng::new(7).next_u64()).collect();
        assert_eq!(a, b);
        let mut r1 = Rng::stream(7, "noise");
        let mut r2 = Rng::stream(7, "init");
        assert_ne!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(123);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn poisson_mean_matches() {
        let mut r = Rng::new(5);
        let n = 20_000;
        let mean = 20.5;
        let total: u64 = (0..n).map(|_| r.poisson(mean)).sum();
        let emp = total as f64 / n as f64;
        // 3 standard errors of the mean
        let tol = 3.0 * (mean / n as f64).sqrt();
        assert!((emp - mean).abs() < tol, "emp {emp}");
    }
}
