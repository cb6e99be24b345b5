//! Learning-based solver for the capacitated vehicle routing problem.
//!
//! The crate couples two learned components: a discrete diffusion model that
//! predicts, for every customer pair, whether the pair should be served by the
//! same vehicle (a binary "same-route" matrix), and an autoregressive
//! encoder-decoder policy whose attention is guided by that matrix while
//! constructing routes node by node.  Classical baselines (exact dynamic
//! programming, savings construction, nearest neighbour) provide reference
//! solutions and training labels, and an eightfold symmetry augmentation is
//! used both for data generation and at inference time.

pub mod archive;
pub mod augment;
pub mod config;
pub mod constraint;
pub mod dataset;
pub mod decoder;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod instance;
pub mod nn;
pub mod oracles;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod tsplib;

pub use error::{Error, Result};
