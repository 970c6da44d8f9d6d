//! Desk-scale laboratory for open-vocabulary classification with learnable
//! prompts and instance contrastive learning, on deterministic synthetic
//! frozen encoders.
//!
//! The pipeline has two training stages. Stage one learns a shared foreground
//! prompt (context vectors prepended to per-class word embeddings) and a
//! background prompt, against a batch-wise subsampled vocabulary so the
//! learned context generalizes to classes never seen during training. Stage
//! two trains a detector analog (projection net plus linear adapter) with a
//! classification loss and an instance contrastive loss drawn from a
//! class-balanced FIFO memory bank.
//!
//! Everything is pure f64, single-threaded, and seeded: identical configs and
//! seeds give bit-identical outputs. Every analytic gradient in the crate is
//! certified against the central-difference oracle in [`numerics`].

pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod icl;
pub mod membank;
pub mod mpl;
pub mod numerics;
pub mod prompt;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
