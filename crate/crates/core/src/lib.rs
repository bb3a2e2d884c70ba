//! Physics-constrained data augmentation for time-lapse seismic velocity
//! inversion.
//!
//! The crate covers the full experiment loop on synthetic CO₂-leak velocity
//! models:
//!
//! * [`datagen`] — layered baseline models plus growing-plume leakage
//!   scenarios (20 yearly snapshots each), mass labels and class splits;
//! * [`wavesim`] — acoustic finite-difference forward modeling that turns
//!   velocity maps into surface seismic gathers;
//! * [`featureext`] — a fixed convolutional feature extractor used by the
//!   style (Gram-matrix) perception loss;
//! * [`genmodels`] — AE/VAE generators, their losses (plain, perception,
//!   temporal-regularized) and latent-space interpolation for synthesizing
//!   velocity maps at unseen leak stages;
//! * [`inversion`] — a small encoder-decoder network mapping gathers back to
//!   velocity maps, trained with and without augmentation;
//! * [`evaluate`] — MAE/SSIM metrics, per-year curves, 2-D projections,
//!   depth-wavenumber spectra and boxplot statistics;
//! * [`pipeline`] — configuration, caching, the end-to-end experiment
//!   driver, and the sweep / grid-search harnesses.
//!
//! Everything is deterministic: given a seed and a config, reruns produce
//! byte-identical data files and identical loss histories. The [`nn`] module
//! holds the shared network plumbing (conv/dense layers, Adam, finite
//! difference gradient checking); it is generic over `f32`/`f64` so tests
//! can verify gradients at 64-bit precision while training runs at 32-bit.

pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod featureext;
pub mod genmodels;
pub mod inversion;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod wavesim;

pub use error::{Error, Result};
