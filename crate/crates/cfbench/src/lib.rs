//! Catastrophic-forgetting benchmark harness.
//!
//! Trains a small model zoo (FC, CONV, dropout variants, LWTA, EWC, IMM) on
//! two-sub-task sequential learning tasks built from 10-class image data,
//! following an application-constrained evaluation protocol: model selection
//! on the first sub-task only, a separate retraining learning-rate sweep,
//! "best"/"last" quality criteria, and baseline/Omega-all reporting.

pub mod data;
pub mod error;
pub mod ewc;
pub mod fisher;
pub mod grid;
pub mod imm;
pub mod layers;
pub mod network;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod slt;
pub mod tensor;

pub use error::{Error, Result};
