//! Desk-scale laboratory for studying whether plug-and-play fine-tuning
//! modules trained on a frozen dual-encoder remain effective after the
//! encoder is upgraded.
//!
//! The crate provides:
//! - [`numcore`]: deterministic tensor arithmetic and reverse-mode autodiff
//!   with a finite-difference verification harness;
//! - [`encoder`]: a frozen toy dual-encoder (transformer text side, MLP image
//!   side) trained contrastively, with depth-parameterized prompt injection;
//! - [`data`]: reproducible synthetic few-shot tasks and shifted test splits;
//! - [`tuners`]: eight efficient fine-tuning methods behind one interface,
//!   including attention-fused class-conditioned prompts;
//! - [`upgrade`]: a model-upgrade simulator (continued contrastive training
//!   or controlled synthetic drift);
//! - [`evalkit`]: compatibility metrics (Base/New/H), per-layer drift
//!   profiles, depth sweeps and OOD evaluation.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod numcore;
pub mod optim;
pub mod rng;
pub mod tuners;
pub mod upgrade;

pub use error::{Error, Result};
pub use numcore::{DiffGraph, Tensor};
