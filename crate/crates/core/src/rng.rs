//! Named deterministic random streams.
//!
//! Every consumer of randomness derives its own stream from a master seed and
//! a purpose string, so adding or removing one consumer never perturbs the
//! draws seen by another. Streams are ChaCha8 generators whose 256-bit seed is
//! the SHA-256 of the master seed and the name; the word position of a stream
//! can be captured and restored, which is how checkpoints resume mid-run
//! without replaying history.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A deterministic random stream identified by `(master, name)`.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]); // separator so (1, "ab") != (1, "a" + junk)
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Recreates a stream at a saved word position.
pub fn stream_at(master: u64, name: &str, word_pos: u128) -> ChaCha8Rng {
    let mut rng = stream(master, name);
    rng.set_word_pos(word_pos);
    rng
}
