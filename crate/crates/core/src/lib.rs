//! Desk-scale material latent space pipeline.
//!
//! A five-channel PBR material image space (albedo, roughness, metallic) is
//! learned on top of a frozen base VAE via residual prediction, then a
//! multi-view velocity model with correspondence-aware attention generates
//! view sets that are baked into UV textures. Everything runs on CPU in f64
//! and is deterministic given a seed.

pub mod arrayio;
pub mod autodiff;
pub mod baking;
pub mod config;
pub mod geometry;
pub mod matvae;
pub mod metrics;
pub mod mvdiffusion;
pub mod nn;
pub mod preview;
pub mod rng;
pub mod synthdata;
