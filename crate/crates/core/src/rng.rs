//! Seed fan-out.
//!
//! One master seed fans out to independent per-purpose streams through a
//! hash of `(master, label, counter)`. Streams stay decoupled: adding a
//! consumer under one label never shifts the values drawn under another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `master` for the given label and counter.
pub fn derive_seed(master: u64, label: &str, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(label.as_bytes());
    h.update([0x1f]);
    h.update(counter.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// RNG for one labeled stream of a master seed.
pub fn stream(master: u64, label: &str, counter: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, label, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn labels_are_independent() {
        let a = derive_seed(7, "data", 0);
        let b = derive_seed(7, "vae", 0);
        let c = derive_seed(7, "data", 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "data", 0));
    }

    #[test]
    fn stream_is_reproducible() {
        let mut r1 = stream(42, "noise", 3);
        let mut r2 = stream(42, "noise", 3);
        let x1: Vec<f64> = (0..16).map(|_| r1.gen::<f64>()).collect();
        let x2: Vec<f64> = (0..16).map(|_| r2.gen::<f64>()).collect();
        assert_eq!(x1, x2);
    }
}
