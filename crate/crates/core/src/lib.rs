//! Hybrid attention/state-space diffusion backbone with a staged
//! transformer-to-Mamba distillation pipeline, built on a small
//! reverse-mode autodiff engine.
//!
//! The crate is CPU-only and fully deterministic: given the same config and
//! seed, training produces bit-identical checkpoints and metric logs.

pub mod bench;
pub mod diffusion;
pub mod distill;
pub mod model;
pub mod nn;
pub mod stats;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod verify;
