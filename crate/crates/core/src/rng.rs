//! Named random substreams derived from one root seed.
//!
//! Every stochastic stage draws from `substream(root, label, index)`, so a
//! stage's draws depend only on its own label and index, never on how many
//! numbers another stage consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn substream(root: u64, label: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child seed (for APIs that take a plain `u64`).
pub fn derive_seed(root: u64, label: &str) -> u64 {
    use rand::RngCore;
    substream(root, label, 0).next_u64()
}
