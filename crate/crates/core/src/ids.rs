//! Identifier generation with optional deterministic seeding.
//!
//! Query and session ids are UUIDs. The scenario harness needs runs to be
//! reproducible byte for byte, so id generation goes through an [`IdSource`]
//! that can be seeded instead of drawing from OS entropy.

use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use uuid::Uuid;

pub struct IdSource {
    rng: Mutex<ChaCha12Rng>,
}

impl IdSource {
    /// Source seeded from OS entropy; ids are unpredictable.
    pub fn random() -> Self {
        Self { rng: Mutex::new(ChaCha12Rng::from_entropy()) }
    }

    /// Deterministic source: the same seed yields the same id stream.
    pub fn seeded(seed: u64) -> Self {
        Self { rng: Mutex::new(ChaCha12Rng::seed_from_u64(seed)) }
    }

    pub fn next_uuid(&self) -> Uuid {
        let mut bytes = [0u8; 16];
        self.rng.lock().expect("id rng poisoned").fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid()
    }
}

impl std::fmt::Debug for IdSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("IdSource")
    }
}
