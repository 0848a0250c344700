//! Desk-scale laboratory for domain-shifted diffusion fine-tuning.
//!
//! A tiny pixel-space diffusion transformer is pretrained on a procedural
//! "real" sprite domain, then fine-tuned for control-map-conditioned 2x2
//! multiview generation from a "synthetic" sprite domain. Domain Shifter
//! adapters, two-stage training with representation binding, and
//! inference-time domain shifting keep realism and controllability from
//! trading off, next to a set of baseline adapter recipes and a metric suite.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod eval;
pub mod numerics;
pub mod ppm;
pub mod probe;
pub mod study;
pub mod training;
pub mod util;

pub use adapters::DomainId;
pub use numerics::{NumericsError, Scalar, Tensor};
