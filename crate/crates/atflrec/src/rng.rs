//! Seed derivation for independent deterministic RNG streams.

/// Derive a child seed from a base seed and a stream label. FNV-1a over the
/// label, mixed with the seed through a splitmix64 finalizer.
pub fn derive(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stream.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
