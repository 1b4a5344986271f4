//! Seed splitting.
//!
//! Every run is driven by one 64-bit seed. Each consumer asks for a named
//! sub-stream: the ChaCha8 generator seeded from the run seed with its stream
//! id set to the FNV-1a hash of the name. Indexed children (one per image, per
//! epoch, per fold) get a fresh seed from [`derive_seed`]. Adding a new
//! consumer never perturbs the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream names used across the crate.
pub mod streams {
    pub const INIT: &str = "model-init";
    pub const SCENE: &str = "synthetic-scene";
    pub const SPLIT: &str = "dataset-split";
    pub const TRAIN_SAMPLES: &str = "train-samples";
    pub const VAL_SAMPLES: &str = "val-samples";
    pub const TEST_SAMPLES: &str = "test-samples";
    pub const SHUFFLE: &str = "shuffle";
    pub const AUGMENT: &str = "augment";
    pub const LABELED_PATCHES: &str = "labeled-patches";
    pub const LINEAR_INIT: &str = "linear-init";
    pub const LINEAR_SPLIT: &str = "linear-holdout";
}

pub fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Child seed for item `index` of the named sub-stream.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name) ^ splitmix64(index)))
}

pub fn child(seed: u64, name: &str, index: u64) -> Rng {
    substream(derive_seed(seed, name, index), name)
}
