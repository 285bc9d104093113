//! Skill-discovery conservative Q-learning for multi-task offline
//! multi-agent reinforcement learning.
//!
//! The crate is organized around the pipeline:
//!
//! * [`env`] — a deterministic, seedable, variable-scale skirmish
//!   environment with entity-structured observations and per-enemy
//!   attack actions, plus scripted behavior policies.
//! * [`data`] — offline dataset generation at four quality tiers,
//!   a portable binary file format, and whole-episode batching.
//! * [`codec`] — the skill-discovery stack: rule-based observation
//!   decomposer, entity transformer encoder with a recurrent hidden
//!   token, skill extraction, and the reconstructing decoder.
//! * [`value`] — skill-conditioned Q-values, the monotone attention
//!   mixing network, TD(λ) targets, and the conservative / calibration
//!   loss terms.
//! * [`trainer`] — the multi-task offline optimization loop with
//!   target synchronization, ablation wiring, and checkpointing.
//! * [`evalkit`] — zero-shot cross-scale evaluation, transfer suites,
//!   skill projections (PCA / t-SNE), and learning-curve artifacts.
//!
//! All randomness derives from caller-provided seeds through a
//! counter-based splitting scheme ([`rng`]); two runs with the same
//! seed produce bit-identical artifacts on the same platform.

pub mod codec;
pub mod data;
pub mod env;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod io;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod value;
pub mod viz;

pub use error::SdcqlError;
