//! Many-to-many cross-modality image translation and unsupervised multi-organ
//! segmentation, exercised end to end on a synthetic multi-domain phantom
//! benchmark with exact ground-truth masks.
//!
//! The pipeline disentangles images into a domain-invariant content map and a
//! low-dimensional style code (via a VAE), converts the style into latent
//! per-filter scales that modulate a single domain-code-conditioned generator,
//! and trains per-target segmentation networks on translated images. A joint
//! (image, foreground-probability) discriminator regularizes translation and
//! segmentation together.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff over dense CPU tensors (f32/f64).
//! - [`phantomgen`]: procedural multi-domain phantom dataset with masks.
//! - [`netblocks`]: encoders, latent-scale layer, generator, discriminators,
//!   segmentors.
//! - [`losses`]: the nine training objectives as pure functions.
//! - [`trainer`]: alternating optimization, LR schedule, checkpointing.
//! - [`evalsuite`]: cycle-reconstruction MAE, Dice, cluster distances,
//!   ablations.
//! - [`cli`]: the `xmoda` command-line entry point.

pub mod cli;
pub mod config;
pub mod containerio;
pub mod evalsuite;
pub mod losses;
pub mod netblocks;
pub mod phantomgen;
pub mod plotting;
pub mod rngutil;
pub mod tensor;
pub mod trainer;
