//! Memory-augmented sliding-window transformer for online phase recognition.
//!
//! The crate couples a small ViT-style classifier with a two-part "memory of
//! surgery": a step-filtered long-term history of which phases have presented
//! (and for how long), and a short-term cache of cls-token impressions from
//! recently processed frames. History fuses into the cls token before the
//! decoder blocks, impressions after — both by element-wise addition.
//! Everything runs on a built-in reverse-mode autodiff engine, desk-scale on
//! CPU, with synthetic procedure data for end-to-end experiments.
//!
//! Start with the [`guide`] for a narrative walkthrough.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;

pub use autodiff::Tensor;
pub use error::{Error, Result};
pub use real::Real;
