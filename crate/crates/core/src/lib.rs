//! Counterfactual treatment-trajectory engine.
//!
//! The crate learns treatment-balanced sequence representations with a
//! sampling-based MMD penalty, predicts multi-step outcomes under alternative
//! treatment plans, and explains predictions with integrated gradients. A
//! confounded tumor-growth simulator with a ground-truth counterfactual oracle
//! is included for validation.
//!
//! Module map:
//! - [`numkit`]: tensors, random streams, Adam, finite-difference checker
//! - [`tumorsim`]: PKPD tumor-growth cohort generator and oracle
//! - [`dataio`]: dataset schema, files, imputation, normalization, windows, splits
//! - [`seqmodel`]: causal TCN encoder, heads, probe decoder, checkpoints
//! - [`balancing`]: RBF kernel, unbiased sMMD, gradient-reversal and domain-confusion losses
//! - [`training`]: joint objective, λ annealing, training loop, classifier losses
//! - [`inference`]: autoregressive rollout, plan comparison, attribution, explanations
//! - [`evalkit`]: metrics, probes, representation export

pub mod balancing;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod inference;
pub mod numkit;
pub mod seqmodel;
pub mod training;
pub mod tumorsim;

pub use error::{Error, Result};
