//! Blackbox GAN-based adversarial attacks against deep clustering models,
//! plus the evaluation stack: clustering metrics, query accounting, norm
//! sweeps, transferability, defender-side checks, and a mock album-clustering
//! service with a label-only API.

pub mod attack;
pub mod clustering;
pub mod data;
pub mod defense;
pub mod error;
pub mod metrics;
pub mod mlaas;
pub mod nn;
pub mod report;
pub mod transfer;

pub use error::{Error, Result};
