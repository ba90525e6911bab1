//! Seeded random streams.
//!
//! Every experiment owns a single global seed. All randomness is drawn from
//! named streams derived from that seed, so changing one experimental factor
//! (say, the poison sample selection) re-seeds exactly one stream and leaves
//! the rest untouched. Stream derivation hashes the seed together with the
//! stream name, which keeps the mapping stable across platforms and builds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Named random streams used across the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// MLM mask selection and 80/10/10 assignment.
    Masking,
    /// Which samples get poisoned, and per-sample anchor draws.
    PoisonSampling,
    /// Batch shuffling during training.
    Shuffling,
    /// Synthetic corpus generation.
    DataGen,
    /// Dropout masks.
    Dropout,
    /// Anchor sampling for clean injection targets and downstream tuning.
    AnchorSampling,
    /// Defense-side calibration draws.
    Defense,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Masking => "masking",
            Stream::PoisonSampling => "poison-sampling",
            Stream::Shuffling => "shuffling",
            Stream::DataGen => "data-gen",
            Stream::Dropout => "dropout",
            Stream::AnchorSampling => "anchor-sampling",
            Stream::Defense => "defense",
        }
    }
}

/// Factory for named deterministic RNG streams under one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRng {
    seed: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// RNG for a named stream. Same seed + same stream = same sequence.
    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        self.labeled(stream.name())
    }

    /// RNG for an ad-hoc label (e.g. one per ablation cell).
    pub fn labeled(&self, label: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(b"/");
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut seed32 = [0u8; 32];
        seed32.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed32)
    }

    /// Derive a child factory, e.g. one per ablation cell or per tuning run.
    pub fn derive(&self, label: &str) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(b"#");
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        StreamRng::new(u64::from_le_bytes(bytes))
    }
}
