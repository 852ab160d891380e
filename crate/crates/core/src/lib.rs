//! Two-stage hybrid autoregressive generator over paired discrete and
//! continuous token grids.
//!
//! Stage 1 is a small class-conditional causal transformer over discrete
//! codebook indices. Stage 2 is a masked bidirectional encoder-decoder
//! that fuses the class, the visible continuous tokens, and the Stage-1
//! discrete tokens into a per-token condition vector, from which a small
//! diffusion MLP denoises each continuous token. Everything runs on a
//! self-contained f64 autodiff tape, trained and evaluated against a
//! synthetic paired-tokenizer world with closed-form statistics.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod synthetic;

pub use error::{D2cError, Result};
