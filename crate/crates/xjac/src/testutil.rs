//! Shared helpers for unit tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{Activation, Architecture, EncoderConfig, Pooling, SiameseModel};
use crate::tensor::Matrix;
use crate::vocab::{tokenize, TokenSequence, Vocabulary};

pub fn small_vocab() -> Vocabulary {
    Vocabulary::build(
        &[
            "the cat sat on a warm mat",
            "a dog ran over the cold hill",
            "hot coffee is not very good",
            "bad tea is still quite hot",
        ],
        1,
    )
    .unwrap()
}

pub fn config(arch: Architecture, dim: usize, layers: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        arch,
        dim,
        layers,
        heads,
        out_dim: dim,
        max_seq: 16,
        activation: Activation::Gelu,
        pooling: Pooling::Mean,
        adjusted: true,
    }
}

pub fn model(
    arch: Architecture,
    dim: usize,
    layers: usize,
    heads: usize,
    seed: u64,
) -> SiameseModel {
    SiameseModel::new(config(arch, dim, layers, heads), small_vocab(), seed).unwrap()
}

pub fn seq(model: &SiameseModel, text: &str) -> TokenSequence {
    tokenize(text, &model.vocab).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
