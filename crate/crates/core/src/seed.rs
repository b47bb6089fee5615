//! Per-stage seed expansion from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes `(root, stage, counter)` into an independent 64-bit seed.
pub fn derive_seed(root: u64, stage: &str, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(counter.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stage_rng(root: u64, stage: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage, counter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_and_counters_separate() {
        let a = derive_seed(3, "pretrain", 0);
        assert_eq!(a, derive_seed(3, "pretrain", 0));
        assert_ne!(a, derive_seed(3, "pretrain", 1));
        assert_ne!(a, derive_seed(3, "finetune", 0));
        assert_ne!(a, derive_seed(4, "pretrain", 0));
        // Length prefix keeps ("ab", ..) and ("a", ..) apart even with shared bytes.
        assert_ne!(derive_seed(0, "ab", 0), derive_seed(0, "a", 0));
    }
}
