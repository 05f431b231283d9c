//! Deterministic counter-based random numbers.
//!
//! Every stream is a pure function of a 64-bit key and a draw counter, so the
//! same (key, counter) pair yields the same value on any platform and in any
//! call order. Substreams are derived by mixing a label into the key, never by
//! sharing a mutable state, which is what makes dropout masks reproducible
//! under both teacher forcing and incremental decoding.

/// Identifies the generator so serialized artifacts can name their source.
pub const RNG_ALGORITHM: &str = "splitmix64-counter-v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer: bijective avalanche mix of a 64-bit word.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; stable across platforms.
#[inline]
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    /// Independent substream named by a label. Derivation only mixes keys;
    /// the parent stream is not advanced.
    pub fn derive(&self, label: &str) -> Rng {
        Rng {
            key: mix(self.key ^ hash_label(label).wrapping_mul(GOLDEN)),
            counter: 0,
        }
    }

    /// Independent substream keyed by an integer (record ids, layer indices).
    pub fn derive_u64(&self, salt: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(salt.wrapping_add(1).wrapping_mul(GOLDEN))),
            counter: 0,
        }
    }

    /// Value at an absolute position of the stream, without advancing it.
    pub fn at(&self, index: u64) -> u64 {
        mix(self
            .key
            .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 + 1.0; // in [1, 2^53]
        let u1 = u1 * (1.0 / (1u64 << 53) as f64); // in (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n). Lemire multiply-shift; requires n > 0.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
