//! Hierarchical, counter-based seed derivation.
//!
//! A [`SeedTree`] names a random stream by a root seed plus a path of
//! `(label, index)` pairs. The stream itself is a ChaCha20 generator keyed by a
//! SHA-256 digest of the full path, so the stream for a given path never
//! depends on how many other streams were drawn before it. Parallel and
//! sequential executions therefore consume identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Domain separator mixed into every digest.
const DOMAIN: &[u8] = b"corap.seed-tree.v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTree {
    pub root_seed: u64,
    #[serde(default)]
    pub path: Vec<(String, u64)>,
}

impl SeedTree {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            path: Vec::new(),
        }
    }

    /// Child stream at `label/index`. Pure; the parent is unchanged.
    #[must_use]
    pub fn derive(&self, label: &str, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push((label.to_owned(), index));
        Self {
            root_seed: self.root_seed,
            path,
        }
    }

    /// 32-byte key identifying this stream.
    pub fn key(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(DOMAIN);
        hasher.update(self.root_seed.to_le_bytes());
        for (label, index) in &self.path {
            // length-prefixing keeps ("ab", 1) and ("a", ...) apart
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
            hasher.update(index.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.key())
    }

    /// A 64-bit seed for consumers that only accept integers (remote backends).
    pub fn seed_u64(&self) -> u64 {
        let key = self.key();
        u64::from_le_bytes(key[..8].try_into().expect("slice of length 8"))
    }

    /// Human-readable path, e.g. `7/calibrate:0/example:3`.
    pub fn describe(&self) -> String {
        let mut out = self.root_seed.to_string();
        for (label, index) in &self.path {
            out.push('/');
            out.push_str(label);
            out.push(':');
            out.push_str(&index.to_string());
        }
        out
    }
}

/// Free-function form of [`SeedTree::derive`].
pub fn derive_stream(tree: &SeedTree, label: &str, index: u64) -> SeedTree {
    tree.derive(label, index)
}
