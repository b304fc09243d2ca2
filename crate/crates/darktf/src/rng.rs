//! Seeded deterministic random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
//! advanced by the golden-ratio increment and finalized with a murmur-style
//! mixer. It is tiny, has no global state, and produces a bit-identical
//! stream for a given seed on every platform, which is what the
//! reproducibility guarantees of this crate rest on.

/// Deterministic generator state. Identical seed + identical call sequence
/// yields a bit-identical value sequence.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Spare normal deviate from Box-Muller, consumed before drawing anew.
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
        Rng { state: seed, spare_normal: None }
    }

    /// Derives an independent stream from a seed and a tag path, so that
    /// e.g. each clip of each split gets its own generator regardless of
    /// generation order.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut s = mix(seed ^ GOLDEN);
        for &t in tags {
            s = mix(s.wrapping_add(GOLDEN).wrapping_add(mix(t)));
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Uses Lemire's multiply-shift reduction;
    /// the tiny modulo bias is irrelevant here and the result is fully
    /// deterministic.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal deviate via Box-Muller; the second deviate of each
    /// pair is cached so the stream stays deterministic per call count.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u in (0,1] to keep ln(u) finite.
        let u = 1.0 - self.uniform();
        let v = self.uniform();
        let r = (-2.0 * u.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * v;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
