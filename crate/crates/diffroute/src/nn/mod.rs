//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every primitive operation; [`Tape::backward`] walks the
//! record once to produce exact gradients for all bound parameters.  The
//! building blocks here (linear maps, batch norm, softmax, multi-head
//! attention, Adam) are shared by the denoising network, the encoder and the
//! decoder.  Everything is plain `f64` on [`ndarray::Array2`], keeping runs
//! bit-for-bit reproducible.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::Adam;
pub use layers::{batchnorm, linear, mlp2, multi_head_attention, softmax_rows, MASK_NEG};
pub use params::{init_bn, init_linear, init_matrix, init_mlp2, ParamSet};
pub use tape::{Id, Tape};
