//! Desk-scale laboratory for transferable backdoor attacks on prompt-based
//! masked language models.
//!
//! The pipeline has three stages mirroring the threat model it studies: an
//! attacker pre-trains a micro masked LM on a synthetic shadow corpus and
//! injects trigger-to-anchor backdoors through a joint clean+poison
//! objective; a downstream user retunes the published checkpoint with one of
//! several prompting strategies (manual, searched discrete, continuous soft
//! prompts, or a prompt-free classifier head); the attacker then measures
//! attack transferability, runs factor ablations, and probes two test-time
//! defenses (perplexity-based word removal and perturbation-sensitivity
//! filtering).
//!
//! Everything is deterministic under a single experiment seed: randomness is
//! split into named streams so an ablation changes exactly one factor.

pub mod corpus;
pub mod error;
pub mod exp;
pub mod inject;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tune;
pub mod verbalizer;

pub use error::{Error, Result};
pub use rng::{Stream, StreamRng};
pub use tensor::{Adam, AdamConfig, Graph, Tensor, Var};
