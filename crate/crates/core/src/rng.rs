//! Deterministic random streams.
//!
//! Every random draw in the lab comes from a ChaCha8 stream keyed by
//! `(seed, domain, step, index)`, so results never depend on call order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag that separates otherwise identical `(seed, step, index)` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Rollout = 1,
    EvalSample = 2,
    Init = 3,
    Dataset = 4,
    Demonstration = 5,
    MleBatch = 6,
    Fixture = 7,
}

pub fn stream(seed: u64, domain: Domain, step: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
