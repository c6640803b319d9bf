//! Counter-based hashing for lattice randomness.
//!
//! Every random quantity attached to a lattice cell is a pure function of
//! `(master seed, stream, cell)`. There is no sequential generator state, so
//! values do not depend on evaluation order or on how work is split across
//! threads.

use crate::env::Cell;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child key from a parent key and a counter.
#[inline]
pub fn derive(parent: u64, counter: u64) -> u64 {
    mix64(parent ^ mix64(counter.wrapping_add(GOLDEN)))
}

/// Hash of a lattice cell under a given key.
#[inline]
pub fn hash_cell(key: u64, cell: &Cell) -> u64 {
    let mut h = mix64(key.wrapping_add(GOLDEN));
    for (axis, &c) in cell.iter().enumerate() {
        h = mix64(h ^ (c as u64).wrapping_add((axis as u64 + 1).wrapping_mul(GOLDEN)));
    }
    h
}

/// Maps a 64-bit hash to a uniform double in `[0, 1)`.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
