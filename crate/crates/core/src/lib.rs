//! Teacher → assistant → student knowledge distillation for multi-label
//! image classification.
//!
//! A large teacher ensemble is trained on hard labels, an intermediate
//! assistant is distilled from it through temperature-softened labels and
//! a KL feature-map term, and a 3-block convolutional student is distilled
//! from the assistant through soft labels and a Wasserstein feature-map
//! term. The crate also ships the data plumbing (CSV manifests, label
//! policies, resampling, a synthetic dataset), evaluation and an ablation
//! harness.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod types;

pub use config::RunConfig;
pub use error::{Error, Result};
