//! Tri-CRLAD: semi-supervised anomaly detection for tabular sensor
//! signals, built around a Soft Actor-Critic agent that interacts with a
//! three-pool decision environment and scores points through a
//! counterfactual causal feature extractor.
//!
//! The crate is organized along the pipeline:
//!
//! - [`dataset`]: ingestion, min-max scaling, stratified splits, and the
//!   semi-supervised regime (labeled anomaly set + contaminated unlabeled
//!   set).
//! - [`diffnet`]: a minimal dense-network core with exact reverse-mode
//!   gradients, Adam, Xavier init, and soft target updates.
//! - [`cfe`]: the causal feature extractor (counterfactual inputs,
//!   cross-attention, MMD + asymmetric-L2 training loss).
//! - [`iforest`]: from-scratch isolation forest used for the unlabeled
//!   reward branch and as the unsupervised reference detector.
//! - [`adie`]: the anomaly decision-making interactive environment
//!   (pools, history-similarity sampling, adaptive threshold, adaptive
//!   rewards).
//! - [`sac`]: the soft actor-critic agent (squashed Gaussian policy, twin
//!   critics, value/target-value networks, replay buffer).
//! - [`trainer`]: the end-to-end training loop, ablation wiring, and
//!   checkpointing.
//! - [`harness`]: AUC-ROC evaluation, multi-seed experiments, and the
//!   report generators behind the CLI.

pub mod adie;
pub mod cfe;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod iforest;
pub mod linalg;
pub mod parallel;
pub mod sac;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Derives an independent RNG stream for a named component of a run.
///
/// Every stochastic component (split, regime, forest, environment, agent)
/// seeds its own ChaCha stream from the master seed and a label, so
/// changing one component's draw count never perturbs another's.
pub fn seed_stream(master: u64, label: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in master.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    rand_chacha::ChaCha8Rng::seed_from_u64(h)
}
