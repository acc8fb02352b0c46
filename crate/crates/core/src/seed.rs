//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by `(master, domain, counter)`
//! and expanded with SplitMix64:
//!
//! ```text
//! derive(master, domain, counter) = mix(mix(master ^ mix(domain)) + counter * GOLDEN)
//! ```
//!
//! Streams that belong to different domains never collide in practice, and
//! adding a new task (a new counter or a new domain) never perturbs the
//! seeds handed to existing tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Domain tags. Values are part of the reproducibility contract.
pub mod domain {
    pub const SAMPLE_CHUNK: u64 = 1;
    pub const ALIGNMENT: u64 = 2;
    pub const PAIR_ORIGINALS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DATA: u64 = 7;
    pub const TRAIN: u64 = 8;
    pub const PRESET: u64 = 9;
    pub const SPEC: u64 = 10;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, domain: u64, counter: u64) -> u64 {
    let keyed = splitmix64(master ^ splitmix64(domain));
    splitmix64(keyed.wrapping_add(counter.wrapping_mul(GOLDEN)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, domain: u64, counter: u64) -> ChaCha8Rng {
    rng_from_seed(derive_seed(master, domain, counter))
}
