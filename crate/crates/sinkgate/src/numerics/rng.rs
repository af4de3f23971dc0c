//! Counter-based splittable RNG.
//!
//! Sub-streams are derived as `hash(run_seed, purpose_tag, index)`, so the
//! stream a consumer sees does not depend on how many draws other consumers
//! made before it. The core generator is SplitMix64, which is stateless per
//! step and produces the same stream on every platform.

/// Seeded deterministic generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    h
}

impl Rng {
    /// Derive a sub-stream from `(run_seed, purpose_tag, index)`.
    pub fn from_parts(run_seed: u64, purpose_tag: &str, index: u64) -> Self {
        let mut mix = run_seed ^ fnv1a(purpose_tag.as_bytes()).rotate_left(17) ^ index.wrapping_mul(GOLDEN);
        // one scrambling round so nearby (seed, index) pairs decorrelate
        let s = splitmix64(&mut mix);
        Rng { state: s }
    }

    pub fn from_seed(run_seed: u64) -> Self {
        Rng::from_parts(run_seed, "root", 0)
    }

    /// Independent child stream; order of `split` calls does not matter
    /// because derivation is purely (state-at-creation, tag, index) based.
    pub fn split(&self, purpose_tag: &str, index: u64) -> Rng {
        Rng::from_parts(self.state, purpose_tag, index)
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // modulo bias is negligible for the small n used here, but use
        // rejection sampling anyway so streams stay clean
        let bound = n as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates sample of `k` distinct values from 0..n.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
