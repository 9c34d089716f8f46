//! Seed derivation for reproducible parallel work.
//!
//! Every task in a sweep gets its own generator whose seed is a pure function
//! of the master seed and the task's coordinates. The rule is SplitMix64
//! finalization folded over `[master, tag_0, tag_1, ...]`:
//!
//! ```text
//! h = mix(master)
//! for t in tags { h = mix(h ^ mix(t + GOLDEN)) }
//! ```
//!
//! Results therefore do not depend on thread count or execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = mix(master);
    for &t in tags {
        h = mix(h ^ mix(t.wrapping_add(GOLDEN)));
    }
    h
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(master: u64, tags: &[u64]) -> Rng {
    rng_from_seed(derive_seed(master, tags))
}
