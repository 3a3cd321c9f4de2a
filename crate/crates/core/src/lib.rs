//! Modular duplex attention (MODA) from scratch.
//!
//! Everything in this crate is pure computation over dense `f64` matrices and
//! builds with `no_std` + `alloc`. File formats, configuration and the
//! command-line driver live in the companion `moda` crate.
//!
//! Module map:
//!
//! * [`numerics`]: dense matrices, matrix products, stable row softmax.
//! * [`modality`]: multimodal token sequences split into contiguous blocks.
//! * [`modmask`]: causal, fixed, learnable, sink and pseudo-score masks.
//! * [`attention`]: masked attention and the self/cross-modal split.
//! * [`aligner`]: Gram-matrix transfer maps and the fuser.
//! * [`diagnostics`]: self/cross activation, disparity, decay fits.
//! * [`toymodel`]: a small multimodal transformer with manual gradients.

#![no_std]

extern crate alloc;

pub mod aligner;
pub mod attention;
pub mod diagnostics;
mod error;
pub mod modality;
pub mod modmask;
pub mod numerics;
pub mod rng;
pub mod toymodel;

pub use error::{Error, Result};
pub use numerics::Matrix;
