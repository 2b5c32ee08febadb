//! Deterministic randomness.
//!
//! A run owns a single root seed. Every consumer derives its own independent
//! generator through a named stream, so adding or reordering consumers never
//! perturbs the draws seen by the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of all randomness for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        SeedStream { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Generator for the named stream. The same `(root, name)` pair always
    /// yields the same sequence; distinct names yield independent sequences.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(fnv1a64(name.as_bytes()));
        rng
    }

    /// Child scope: `scope("fold3").rng("stage1")` equals `rng("fold3/stage1")`.
    pub fn scoped(&self, prefix: &str) -> ScopedSeed {
        ScopedSeed {
            stream: *self,
            prefix: prefix.to_string(),
        }
    }
}

/// [`SeedStream`] with a path prefix applied to every stream name.
#[derive(Debug, Clone)]
pub struct ScopedSeed {
    stream: SeedStream,
    prefix: String,
}

impl ScopedSeed {
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        self.stream.rng(&format!("{}/{}", self.prefix, name))
    }
}

/// FNV-1a on bytes. Stable across platforms; quality is sufficient for
/// stream separation (ChaCha streams differing in any bit are independent).
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
