//! Conditional diffusion forecasting of implied-volatility surfaces.
//!
//! `voldiff` trains a small conditional denoising-diffusion model that
//! generates one-day-ahead implied-volatility surfaces on a fixed 9×9
//! moneyness/tenor grid. Training couples the usual noise-matching
//! objective with a no-arbitrage penalty whose strength follows the
//! signal-to-noise ratio of the diffusion step, and the evaluation side
//! reports accuracy, calibration, and arbitrage statistics for generated
//! surfaces.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`gridmath`] — dense f64 arrays with reverse-mode automatic
//!   differentiation, sized for small fixed-shape networks.
//! - [`dataprep`] — quote smoothing, log-space normalization,
//!   conditioning features, chronological splits, and a synthetic
//!   surface generator for experiments without proprietary data.
//! - [`arbitrage`] — Black-Scholes relative call prices and the
//!   calendar/call-spread/butterfly penalty, in a reference loop form
//!   and a differentiable convolutional form.
//! - [`diffusion`] — the cosine noise schedule, forward perturbation,
//!   SNR weights, denoised estimates, reverse steps, and the terminal
//!   distribution diagnostic.
//! - [`model`] — the conditional U-Net noise predictor with sinusoidal
//!   time embedding and FiLM modulation.
//! - [`training`] — the composite loss, AdamW, gradient clipping, EMA
//!   tracking, plateau learning-rate scheduling, and checkpoints.
//! - [`sampling`] — conditional ancestral sampling with EMA weights.
//! - [`evaluation`] — MAPE, confidence-interval calibration, moments,
//!   and per-day arbitrage series.
//! - [`cli`] — the `voldiff` command-line entry points.
//!
//! See the `examples/` directory for one runnable example per stage; the
//! thin `voldiff` binary wires the same functions into subcommands.

pub mod arbitrage;
pub mod cli;
pub mod dataprep;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gridmath;
pub mod model;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
