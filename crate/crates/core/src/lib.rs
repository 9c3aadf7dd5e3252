//! Model-merging laboratory.
//!
//! Builds multi-task models out of fine-tuned checkpoints that share a
//! pretrained base. Static baselines ([`static_mergers`]) sit next to
//! coefficient-learning mergers ([`adaptive`]), the strongest of which
//! distils every fine-tuned teacher into the merged student while
//! optimising layer-wise coefficients with sharpness-aware minimisation.
//! [`bounds`] certifies the accompanying generalisation and excess-risk
//! inequalities numerically, and [`harness`] runs the end-to-end
//! experiments on synthetic suites from [`data`].

pub mod adaptive;
pub mod bounds;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod nn;
pub mod static_mergers;
pub mod task_vectors;

pub use error::{MergeError, Result};
pub use exec::{derive_seed, Execution};
