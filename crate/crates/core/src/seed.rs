//! Per-cell RNG seeds for experiments.
//!
//! Every `(app, spec, budget, run)` cell gets its own stream derived by
//! hashing, so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::domain::Specification;

/// Hashes the base seed and a list of labelled parts into a 64-bit seed.
pub fn derive_seed(base: u64, parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn spec_bytes(spec: &Specification) -> Vec<u8> {
    let alpha = spec.alpha();
    [spec.lambda(), alpha.cpu(), alpha.mem(), alpha.net()]
        .iter()
        .flat_map(|v| v.to_bits().to_le_bytes())
        .collect()
}

pub fn cell_seed(base: u64, app_id: &str, spec: &Specification, budget: usize, run: usize) -> u64 {
    derive_seed(
        base,
        &[
            app_id.as_bytes(),
            &spec_bytes(spec),
            &(budget as u64).to_le_bytes(),
            &(run as u64).to_le_bytes(),
        ],
    )
}

pub fn cell_rng(
    base: u64,
    app_id: &str,
    spec: &Specification,
    budget: usize,
    run: usize,
) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cell_seed(base, app_id, spec, budget, run))
}
