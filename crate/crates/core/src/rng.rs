//! Deterministic pseudo-random numbers for parameter initialization.
//!
//! The generator is a plain splitmix64 stream. It is tiny, has no
//! configuration surface, and is trivially reproducible in any language, so
//! a serialized seed pins an entire training run.

/// splitmix64 stream generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in `[0, 1)` built from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[-limit, limit)`.
    pub fn next_symmetric(&mut self, limit: f64) -> f64 {
        limit * (2.0 * self.next_f64() - 1.0)
    }

    /// Uniform integer in `[lo, hi]` by rejection-free modular reduction.
    ///
    /// The tiny modulo bias is irrelevant here: this is only used to build
    /// synthetic test fixtures, never to enumerate fault spaces.
    pub fn next_range_i64(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as i64
    }
}
