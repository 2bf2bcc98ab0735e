//! Attentive-but-diverse feature learning at desk scale.
//!
//! Channel and position attention, the spectral value difference orthogonality
//! penalty with unrolled power iteration, the composite re-identification loss,
//! a toy two-branch network and retrieval/de-correlation diagnostics, all on top
//! of a small dense tensor type and a reverse-mode tape.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod losses;
pub mod network;
pub mod orthogonality;
pub mod seeds;
pub mod tensor;

pub use autodiff::{GradientMap, NormStats, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape2, Shape3, Tensor};
