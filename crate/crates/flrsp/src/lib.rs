//! Desk-scale simulator for federated learning with randomly selected
//! parameter sharing.
//!
//! The crate trains small models (an MLP and a single-block vision
//! transformer) under FedSGD and FedAvg, lets each client withhold a random
//! subset of update coordinates before upload, and then attacks the
//! intercepted updates with two gradient-inversion methods — a closed-form
//! attention-unrolling reconstruction and an adversarial gradient-matching
//! optimization — to measure how much image content leaks at different
//! sharing rates. Gaussian differential-privacy noise and fixed position
//! embeddings are included as baseline defenses, and reconstruction quality
//! is scored with a global-statistics SSIM.
//!
//! Start with [`harness::run_experiment`] or the runnable programs under
//! `examples/`.

pub mod attacks;
pub mod data;
pub mod error;
pub mod fl;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod params;
pub mod privacy;
pub mod report;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
