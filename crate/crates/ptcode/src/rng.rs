//! Deterministic random streams.
//!
//! Every source of randomness in the pipeline is derived from one root seed
//! plus a stream name (`"prep"`, `"init"`, `"noise"`, `"shuffle"`,
//! `"dropout"`, ...), so changing how one stage consumes randomness does not
//! perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for a named stream under `seed`.
pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    substream(seed, name, 0)
}

/// RNG for a named stream with an extra index (e.g. one stream per epoch).
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    let mix = fnv1a64(&key[..24]);
    key[24..32].copy_from_slice(&mix.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// RNG keyed by a string (e.g. a conversation id), independent of iteration
/// order so parallel consumers stay deterministic.
pub fn keyed_stream(seed: u64, name: &str, key: &str) -> ChaCha8Rng {
    substream(seed, name, fnv1a64(key.as_bytes()))
}
