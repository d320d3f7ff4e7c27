//! Deterministic seed derivation. Every independent random stream (one per
//! domain during generation, one per test sample during evaluation) gets its
//! own seed derived from the run seed and a stream index, so work can be
//! reordered or parallelized without changing any draw.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

pub fn derive2(base: u64, a: u64, b: u64) -> u64 {
    derive(derive(base, a), b)
}
