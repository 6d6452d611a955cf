//! Toy 2D diffusion guidance laboratory.
//!
//! A fractal two-class Gaussian mixture provides exact densities and scores at
//! every noise level. Small magnitude-preserving MLP denoisers are trained
//! against it with exact score matching, sampled with a deterministic Heun
//! probability-flow solver, and combined through classifier-free guidance,
//! autoguidance, naive score truncation, or a blend of the two guidance kinds.
//! Metric proxies quantify outliers, branch coverage, and global distribution
//! match of generated populations.

pub mod checkpoint;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod evalmetrics;
pub mod guidance;
pub mod mixture;
pub mod netmodel;
pub mod render;
pub mod sampler;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};

/// Points, scores and denoised outputs all live in the plane.
pub type Vec2 = nalgebra::Vector2<f64>;
