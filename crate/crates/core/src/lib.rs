//! Synthetic fixed-income datasets: GAN-sampled correlation matrices,
//! attribute generation, simulation sets and tracking-error portfolios.

pub mod error;
pub mod linalg;
pub mod market;
pub mod metrics;
pub mod simulation;
pub mod allocator;
pub mod backtest;
pub mod corrgan;
pub mod autoencoder;

pub use error::{Error, Result};
pub use fixsynth_tensor::derive_seed;
