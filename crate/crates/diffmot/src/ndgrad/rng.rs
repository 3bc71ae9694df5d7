//! Seedable random number generation with a pinned algorithm.
//!
//! The generator is xoshiro256++ seeded through a splitmix64 chain, and
//! standard normals come from the Box-Muller transform (cosine branch only,
//! two uniforms per draw, no cached second value). Equal seeds plus equal
//! call sequences give identical streams on every platform.

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256++ generator with 256 bits of state.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Seed the 256-bit state by running splitmix64 four times.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Derive an independent stream from a root seed and a stream label.
    ///
    /// Used to fan one configuration seed out to the components (data
    /// generation, initialization, noise sampling) without correlated
    /// streams.
    pub fn derive(root: u64, stream: u64) -> Self {
        let mut sm = root;
        let a = splitmix64(&mut sm);
        Rng::from_seed(a ^ stream.wrapping_mul(0xd1342543de82ef95))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch).
    ///
    /// Consumes exactly two uniforms; the sine branch is discarded so the
    /// stream position is a pure function of the number of calls.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Poisson draw by Knuth's product-of-uniforms method. `lambda >= 0`.
    pub fn poisson(&mut self, lambda: f64) -> usize {
        debug_assert!(lambda >= 0.0);
        if lambda == 0.0 {
            return 0;
        }
        let limit = (-lambda).exp();
        let mut k = 0usize;
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
    fn equal_seeds_equal_streams() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(43);
        let same = (0..64).all(|_| a.next_u64() == b.next_u64());
        assert!(!same);
    }

    /// Reference stream for seed 0, pinned so checkpoints and fixtures stay
    /// reproducible across platforms and refactors.
    #[test]
    fn seed_zero_stream_pinned() {
        let mut r = Rng::from_seed(0);
        let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(
            got,
            [
                5987356902031041503,
                7051070477665621255,
                6633766593972829180,
                211316841551650330
            ]
        );

        let mut r = Rng::from_seed(0);
        let uniforms: Vec<f64> = (0..2).map(|_| r.uniform()).collect();
        assert_eq!(uniforms[0].to_bits(), 0.324575268031406683_f64.to_bits());
        assert_eq!(uniforms[1].to_bits(), 0.382239296511673432_f64.to_bits());

        let mut r = Rng::from_seed(0);
        let z = r.normal();
        assert!((z - -1.10790859863383129).abs() < 1e-15);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::from_seed(7);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::from_seed(11);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Rng::derive(1, 0);
        let mut b = Rng::derive(1, 1);
        let same = (0..64).all(|_| a.next_u64() == b.next_u64());
        assert!(!same);
    }

    #[test]
    fn poisson_mean() {
        let mut rng = Rng::from_seed(3);
        let lambda = 2.5;
        let n = 50_000;
        let total: usize = (0..n).map(|_| rng.poisson(lambda)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - lambda).abs() < 0.05, "mean {mean}");
    }
}
