//! Deterministic pseudo-random generation used everywhere in the workspace.
//!
//! All randomness flows through [`Rng`], a xoshiro256++ generator seeded via
//! SplitMix64. Both algorithms are fully specified integer arithmetic, so a
//! given seed produces the same stream on every platform; normal variates use
//! Box–Muller and therefore inherit that reproducibility bit for bit.

/// SplitMix64 step. Used for seeding and for cheap stateless hashing.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a sequence of labels into a single 64-bit seed.
///
/// Domain separation: streams for different purposes (prompt init, fuser
/// init, task noise, ...) are derived from `(domain, seed)` pairs so that
/// two modules sharing a user seed still draw from unrelated streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x5bd1_e995_9d1f_3b27u64;
    let mut out = 0u64;
    for &p in parts {
        state ^= p;
        out ^= splitmix64(&mut state);
        state = state.rotate_left(17) ^ out;
    }
    out ^ splitmix64(&mut state)
}

/// Hashes an ASCII domain label to a u64 for use with [`mix_seed`].
pub fn domain(label: &str) -> u64 {
    // FNV-1a, adequate for label separation.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// xoshiro256++ generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    /// Cached second Box–Muller variate.
    spare_normal: Option<f64>,
}

impl Rng {
    /// Creates a generator from a single seed; the four words of state are
    /// drawn from SplitMix64 as recommended by the xoshiro authors.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            spare_normal: None,
        }
    }

    /// Convenience: a stream for `label` under a user-visible seed.
    pub fn for_domain(label: &str, seed: u64) -> Self {
        Rng::new(mix_seed(&[domain(label), seed]))
    }

    #[inline]
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

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection-free Lemire-style reduction is
    /// avoided on purpose: the modulo bias at n « 2^64 is far below anything
    /// observable here and the plain form is easier to specify.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box–Muller (polar-free, trigonometric form).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Vector of standard normals.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Samples `k` distinct indices from [0, n) in shuffled order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}
