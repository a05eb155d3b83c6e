//! Counter-based random draws.
//!
//! Every stochastic outcome in a run is a pure function of
//! `(seed, purpose, a, b, counter)`, so the same link attempt sees the same
//! draw regardless of what else happened in the run.

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn hash(seed: u64, purpose: u64, a: u64, b: u64, counter: u64) -> u64 {
    mix(seed ^ mix(purpose ^ mix(a ^ mix(b ^ mix(counter)))))
}

/// Uniform in `[0, 1)` with 53 bits of precision.
pub fn unit(seed: u64, purpose: u64, a: u64, b: u64, counter: u64) -> f64 {
    (hash(seed, purpose, a, b, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Child seed `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(master ^ mix(index.wrapping_add(0x5EED)))
}
