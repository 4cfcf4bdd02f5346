//! Deterministic random number generation.
//!
//! Every stochastic component of the lab draws from a [`Rng`] seeded through
//! [`Rng::stream`], which mixes a master seed with a domain tag and a stream
//! index. Streams are independent of thread scheduling, so parallel sampling
//! chains and data loaders reproduce bit-identically for a given seed.

/// Domain tags for deriving independent streams from one master seed.
pub mod domain {
    pub const INIT: u64 = 0x01;
    pub const DATASET: u64 = 0x02;
    pub const TIMESTEPS: u64 = 0x03;
    pub const TRAIN_NOISE: u64 = 0x04;
    pub const SAMPLE_CHAIN: u64 = 0x05;
    pub const EVAL: u64 = 0x06;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256** seeded via splitmix64.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Independent stream for (seed, domain, index).
    pub fn stream(seed: u64, domain: u64, index: u64) -> Self {
        let mut sm = seed;
        let a = splitmix64(&mut sm);
        let mut mixed = a ^ domain.wrapping_mul(0x9e3779b97f4a7c15) ^ index.rotate_left(32);
        let _ = splitmix64(&mut mixed);
        Rng::new(mixed ^ splitmix64(&mut sm).wrapping_add(index))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in (0, 1]. Never returns 0, so it is safe under `ln`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
        lo + u * (hi - lo)
    }

    /// Uniform integer in [1, n].
    #[inline]
    pub fn uniform_1_to(&mut self, n: usize) -> usize {
        debug_assert!(n >= 1);
        // Multiply-shift bounded draw; bias is < 2^-53 for any n here.
        let u = (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
        1 + (u * n as f64) as usize % n
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.uniform_1_to(n) - 1
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
