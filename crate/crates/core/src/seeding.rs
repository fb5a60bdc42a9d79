//! Schedule-independent seed derivation.
//!
//! Every random stream in the simulator is keyed by a base seed plus a
//! list of labels (site id, round, epoch, ...). The key is hashed with
//! SHA-256, so a stream never depends on which thread or in what order
//! it was requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a derivation path.
#[derive(Debug, Clone, Copy)]
pub enum Key<'a> {
    Str(&'a str),
    Num(u64),
}

impl<'a> From<&'a str> for Key<'a> {
    fn from(s: &'a str) -> Self {
        Key::Str(s)
    }
}

impl From<u64> for Key<'_> {
    fn from(n: u64) -> Self {
        Key::Num(n)
    }
}

impl From<usize> for Key<'_> {
    fn from(n: usize) -> Self {
        Key::Num(n as u64)
    }
}

pub fn derive_seed(base: u64, path: &[Key<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in path {
        match part {
            Key::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Key::Num(n) => {
                hasher.update([1u8]);
                hasher.update(n.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(base: u64, path: &[Key<'_>]) -> ChaCha8Rng {
    rng_from(derive_seed(base, path))
}

/// Seed for a site's local training stream in a given round.
pub fn site_round_seed(base: u64, site_id: &str, round: usize) -> u64 {
    derive_seed(base, &[Key::Str("site-round"), Key::Str(site_id), round.into()])
}
