//! Seed derivation.
//!
//! Every random stream in a run descends from one master seed. Sub-seeds are
//! obtained by hashing a textual label together with integer coordinates
//! (replication, fold, epoch, ...) so any component can be re-run in
//! isolation:
//!
//! ```text
//! derive(master, "folds", &[r])          fold assignment of replication r
//! derive(master, "model", &[r, f])       model init of fold f in replication r
//! derive(model_seed, "epoch", &[e])      shuffling/downsampling of epoch e
//! derive(model_seed, "dropout", &[step]) dropout masks of one training step
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Bijective with full avalanche on 64-bit inputs.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, then finalized with [`mix64`].
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

/// Derives a labeled sub-seed from `master`.
pub fn derive(master: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = mix64(master ^ hash_bytes(label.as_bytes()));
    for &c in coords {
        h = mix64(h ^ mix64(c.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
