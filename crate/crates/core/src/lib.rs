//! Latent feature recycling on a small 2-D U-Net, built on a
//! from-scratch reverse-mode autodiff engine.
//!
//! The crate provides the tensor engine, the partitioned U-Net with its
//! recycling forward pass, cycle-count schedules, a synthetic
//! segmentation task family, the training loop, and the evaluation
//! machinery (per-cycle sweeps, memory accounting, schedule ablations).

pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
