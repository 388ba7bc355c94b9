//! Exact feature-pair attribution for Siamese text encoders.
//!
//! A Siamese model scores a pair of texts by the dot product of two
//! independently computed embeddings. This crate decomposes that score into a
//! pairwise attribution matrix over features of the two inputs, built from
//! path-averaged Jacobians of the encoder tail. With the padding reference and
//! shifted embeddings the matrix provably sums to the prediction; the residual
//! quantifies the Riemann approximation of the path integral.
//!
//! The crate ships a small trainable encoder family (linear, MLP,
//! mini-transformer), exact reverse-mode Jacobians with a finite-difference
//! oracle, the attribution engine with convergence diagnostics, a trainer with
//! Spearman evaluation, statistical analyses of attribution outputs, and the
//! `xjac` command-line tool.

pub mod analysis;
pub mod attribution;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod manifest;
pub mod model;
pub mod svg;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{
    Architecture, Embedding, EncoderConfig, ModelParams, Representation, ScoreMode, SiameseModel,
};
pub use vocab::{reference_for, tokenize, TokenSequence, Vocabulary};

/// Cap the worker pool at `XJAC_THREADS` if set. Interpolation steps are the
/// only concurrent workload; their reduction order is fixed, so the thread
/// count never changes results.
pub fn configure_threads_from_env() {
    if let Ok(value) = std::env::var("XJAC_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
