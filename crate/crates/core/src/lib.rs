//! Atomic-model variational autoencoder for heterogeneous cryo-EM.
//!
//! The decoder deforms a base structure with per-residue rigid frames and
//! renders the result through a differentiable image-formation model, so the
//! latent space maps directly onto atomic conformations.

pub mod eval;
pub mod geom;
pub mod model;
pub mod nn;
pub mod render;
pub mod simulate;
pub mod structure;
pub mod train;
