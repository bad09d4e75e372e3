//! Seeded pseudo-random number generation.
//!
//! The generator is pinned so that every stochastic component of the
//! workbench (weight init, shuffling, dropout, attack random starts,
//! synthetic data) is bit-reproducible from a 64-bit seed:
//!
//! * state expansion: `splitmix64` (Steele et al.), four outputs seed the
//!   main generator;
//! * stream: `xoshiro256++` (Blackman & Vigna);
//! * floats: 53 high bits mapped to `[0, 1)`;
//! * bounded integers: bitmask rejection sampling;
//! * shuffling: Fisher-Yates from the top index down.
//!
//! Substreams for per-item work (one stream per image) are derived from
//! `(seed, index)` via splitmix64 over `seed + GOLDEN * (index + 1)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator state; identical seed yields an identical stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrngState {
    s: [u64; 4],
}

impl PrngState {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        PrngState { s }
    }

    /// Independent stream for item `index` under `seed`.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut sm = seed.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1)));
        Self::new(splitmix64(&mut sm))
    }

    /// xoshiro256++ step.
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

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)` via bitmask rejection (unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let mask = (n as u64).next_power_of_two().wrapping_sub(1);
        loop {
            let v = self.next_u64() & mask;
            if v < n as u64 {
                return v as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
