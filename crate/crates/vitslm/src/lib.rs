//! Vision transformer with interchangeable MLP capacity strategies
//! (baseline, grouped weight sharing, shallow width slicing), exact
//! parameter/MAC accounting, and a small deterministic training harness.
//!
//! Layering, bottom to top:
//! - [`tensor`]: dense row-major tensors on a reverse-mode tape
//! - [`model`]: ViT forward pass over a named, alias-aware parameter store
//! - [`init`]: base initialization plus the two capacity transforms
//! - [`stats`]: closed-form parameter and MAC accounting, throughput
//! - [`data`]: CIFAR-style binary records and a seeded synthetic dataset
//! - [`train`]: AdamW training loop, EMA evaluation, stability metrics
//! - [`gradcheck`]: finite-difference gradient verification

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
