//! Seed derivation. Every randomized component draws from a ChaCha stream
//! keyed by a sub-seed derived from one master seed plus a stream label, so
//! adding a consumer never shifts the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Sub-seed for stream `label` at position `index` under `master`.
pub fn sub_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ label_hash(label)).wrapping_add(index))
}

pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, label, index))
}
