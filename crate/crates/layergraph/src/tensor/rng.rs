//! Counter-based splittable random generator.
//!
//! Every draw is a pure function of (key, counter), so a stream keyed by a
//! seed always replays identically, and child streams derived from a parent
//! seed are decorrelated without any shared mutable state. This is what
//! makes dropout masks and weight initialization reproducible across eager
//! and compiled execution of the same graph.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
///
/// Layer-local seeds come from the graph-level seed this way, and per-step
/// training seeds from the model seed.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    mix(parent ^ mix(stream))
}

/// Stable 64-bit hash of a name, for deriving per-node seeds from node names.
pub fn hash_name(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A keyed counter stream: draw `i` equals `mix(key + i * GOLDEN)`.
#[derive(Debug, Clone)]
pub struct SplitRng {
    key: u64,
    counter: u64,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng {
            key: mix(seed),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1) with 24 random bits, generated directly in f32
    /// space so the half-open bound survives rounding.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in [low, high). Clamped below `high` in case the affine map
    /// rounds up to the bound.
    pub fn uniform_f64(&mut self, low: f64, high: f64) -> f64 {
        let v = low + self.next_f64() * (high - low);
        if v >= high {
            high.next_down()
        } else {
            v
        }
    }

    pub fn uniform_f32(&mut self, low: f32, high: f32) -> f32 {
        let v = low + self.next_f32() * (high - low);
        if v >= high {
            high.next_down()
        } else {
            v
        }
    }
}
