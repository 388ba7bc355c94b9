//! The Siamese encoder family: one shared encoder applied to two inputs, with
//! hook points at every layer boundary. Layer 0 is the input embedding
//! (token + learned position); layers 1..=L transform it; the head mean-pools
//! over all positions (pads included, so the map stays smooth along
//! interpolation paths) and projects to the output embedding width.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix};
use crate::vocab::{reference_for, TokenSequence, Vocabulary};

use layers::{
    layer_backward, layer_forward, AttentionParams, FfnParams, LayerCache, LayerNormParams,
    LayerParams, LinearParams, TransformerBlockParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp,
    Transformer,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Architecture,
    /// Representation width D.
    pub dim: usize,
    /// Number of layers L.
    pub layers: usize,
    /// Attention heads (transformer only).
    pub heads: usize,
    /// Output embedding width.
    pub out_dim: usize,
    /// Maximum sequence length.
    pub max_seq: usize,
    pub activation: Activation,
    pub pooling: Pooling,
    /// Shifted scoring: embeddings are taken relative to the padding reference.
    pub adjusted: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            arch: Architecture::Transformer,
            dim: 32,
            layers: 3,
            heads: 4,
            out_dim: 32,
            max_seq: 32,
            activation: Activation::Gelu,
            pooling: Pooling::Mean,
            adjusted: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.out_dim == 0 || self.max_seq == 0 {
            return Err(Error::InvalidConfig(
                "dim, out_dim and max_seq must be positive".into(),
            ));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("need at least one layer".into()));
        }
        if self.arch == Architecture::Transformer
            && (self.heads == 0 || !self.dim.is_multiple_of(self.heads))
        {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.dim
    }
}

/// Token-level activations at a layer boundary. Flattening convention for
/// attribution indices: feature i = position * D + dimension (row-major).
#[derive(Clone, Debug)]
pub struct Representation {
    pub data: Matrix,
    pub layer: usize,
}

impl Representation {
    pub fn seq_len(&self) -> usize {
        self.data.rows()
    }

    pub fn flat_len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub shifted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    Dot,
    Cosine,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScoreMode::Dot),
            "cosine" => Ok(ScoreMode::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown score mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub out_proj: LinearParams,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, vocab_size: usize, seed: u64) -> ModelParams {
        fn sampled(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Matrix {
            let dist = Normal::new(0.0, std).unwrap();
            let mut m = Matrix::zeros(rows, cols);
            for v in m.data_mut() {
                *v = dist.sample(rng);
            }
            m
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.dim;
        let token_embedding = sampled(&mut rng, vocab_size, d, 0.02);
        let positional_embedding = sampled(&mut rng, config.max_seq, d, 0.02);
        let mut sample =
            move |rows: usize, cols: usize, std: f64| sampled(&mut rng, rows, cols, std);

        let w_std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| match config.arch {
                Architecture::Linear => LayerParams::Linear(LinearParams {
                    weight: sample(d, d, w_std),
                    bias: Matrix::zeros(1, d),
                }),
                Architecture::Mlp => LayerParams::Mlp(LinearParams {
                    weight: sample(d, d, w_std),
                    bias: Matrix::zeros(1, d),
                }),
                Architecture::Transformer => {
                    let hidden = config.ffn_hidden();
                    LayerParams::Transformer(Box::new(TransformerBlockParams {
                        ln1: LayerNormParams {
                            gamma: Matrix::from_fn(1, d, |_, _| 1.0),
                            beta: Matrix::zeros(1, d),
                        },
                        attn: AttentionParams {
                            wq: sample(d, d, w_std),
                            bq: Matrix::zeros(1, d),
                            wk: sample(d, d, w_std),
                            bk: Matrix::zeros(1, d),
                            wv: sample(d, d, w_std),
                            bv: Matrix::zeros(1, d),
                            wo: sample(d, d, w_std),
                            bo: Matrix::zeros(1, d),
                        },
                        ln2: LayerNormParams {
                            gamma: Matrix::from_fn(1, d, |_, _| 1.0),
                            beta: Matrix::zeros(1, d),
                        },
                        ffn: FfnParams {
                            w1: sample(hidden, d, w_std),
                            b1: Matrix::zeros(1, hidden),
                            w2: sample(d, hidden, 1.0 / (hidden as f64).sqrt()),
                            b2: Matrix::zeros(1, d),
                        },
                    }))
                }
            })
            .collect();

        // Small head initialization keeps untrained pair scores near zero,
        // matching the [0, 1] label scale the trainer regresses against.
        let out_proj = LinearParams {
            weight: sample(config.out_dim, d, 0.02),
            bias: Matrix::zeros(1, config.out_dim),
        };

        ModelParams {
            token_embedding,
            positional_embedding,
            layers,
            out_proj,
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        fn z(m: &Matrix) -> Matrix {
            Matrix::zeros(m.rows(), m.cols())
        }
        ModelParams {
            token_embedding: z(&self.token_embedding),
            positional_embedding: z(&self.positional_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::Linear(p) => LayerParams::Linear(LinearParams {
                        weight: z(&p.weight),
                        bias: z(&p.bias),
                    }),
                    LayerParams::Mlp(p) => LayerParams::Mlp(LinearParams {
                        weight: z(&p.weight),
                        bias: z(&p.bias),
                    }),
                    LayerParams::Transformer(p) => {
                        LayerParams::Transformer(Box::new(TransformerBlockParams {
                            ln1: LayerNormParams {
                                gamma: z(&p.ln1.gamma),
                                beta: z(&p.ln1.beta),
                            },
                            attn: AttentionParams {
                                wq: z(&p.attn.wq),
                                bq: z(&p.attn.bq),
                                wk: z(&p.attn.wk),
                                bk: z(&p.attn.bk),
                                wv: z(&p.attn.wv),
                                bv: z(&p.attn.bv),
                                wo: z(&p.attn.wo),
                                bo: z(&p.attn.bo),
                            },
                            ln2: LayerNormParams {
                                gamma: z(&p.ln2.gamma),
                                beta: z(&p.ln2.beta),
                            },
                            ffn: FfnParams {
                                w1: z(&p.ffn.w1),
                                b1: z(&p.ffn.b1),
                                w2: z(&p.ffn.w2),
                                b2: z(&p.ffn.b2),
                            },
                        }))
                    }
                })
                .collect(),
            out_proj: LinearParams {
                weight: z(&self.out_proj.weight),
                bias: z(&self.out_proj.bias),
            },
        }
    }

    /// Tensors in the canonical (documented) checkpoint order.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &Matrix)> {
        let mut out: Vec<(String, TensorKind, &Matrix)> = vec![
            (
                "token_embedding".into(),
                TensorKind::Embedding,
                &self.token_embedding,
            ),
            (
                "positional_embedding".into(),
                TensorKind::Embedding,
                &self.positional_embedding,
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let pfx = format!("layer_{:02}", i + 1);
            match layer {
                LayerParams::Linear(p) | LayerParams::Mlp(p) => {
                    out.push((format!("{pfx}.weight"), TensorKind::Weight, &p.weight));
                    out.push((format!("{pfx}.bias"), TensorKind::Bias, &p.bias));
                }
                LayerParams::Transformer(p) => {
                    out.push((format!("{pfx}.ln1.gamma"), TensorKind::Norm, &p.ln1.gamma));
                    out.push((format!("{pfx}.ln1.beta"), TensorKind::Norm, &p.ln1.beta));
                    out.push((format!("{pfx}.attn.wq"), TensorKind::Weight, &p.attn.wq));
                    out.push((format!("{pfx}.attn.bq"), TensorKind::Bias, &p.attn.bq));
                    out.push((format!("{pfx}.attn.wk"), TensorKind::Weight, &p.attn.wk));
                    out.push((format!("{pfx}.attn.bk"), TensorKind::Bias, &p.attn.bk));
                    out.push((format!("{pfx}.attn.wv"), TensorKind::Weight, &p.attn.wv));
                    out.push((format!("{pfx}.attn.bv"), TensorKind::Bias, &p.attn.bv));
                    out.push((format!("{pfx}.attn.wo"), TensorKind::Weight, &p.attn.wo));
                    out.push((format!("{pfx}.attn.bo"), TensorKind::Bias, &p.attn.bo));
                    out.push((format!("{pfx}.ln2.gamma"), TensorKind::Norm, &p.ln2.gamma));
                    out.push((format!("{pfx}.ln2.beta"), TensorKind::Norm, &p.ln2.beta));
                    out.push((format!("{pfx}.ffn.w1"), TensorKind::Weight, &p.ffn.w1));
                    out.push((format!("{pfx}.ffn.b1"), TensorKind::Bias, &p.ffn.b1));
                    out.push((format!("{pfx}.ffn.w2"), TensorKind::Weight, &p.ffn.w2));
                    out.push((format!("{pfx}.ffn.b2"), TensorKind::Bias, &p.ffn.b2));
                }
            }
        }
        out.push((
            "output_projection.weight".into(),
            TensorKind::Weight,
            &self.out_proj.weight,
        ));
        out.push((
            "output_projection.bias".into(),
            TensorKind::Bias,
            &self.out_proj.bias,
        ));
        out
    }

    /// Mutable view over the same tensors, in the same order as [`tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut Matrix)> {
        let mut out: Vec<(TensorKind, &mut Matrix)> = vec![
            (TensorKind::Embedding, &mut self.token_embedding),
            (TensorKind::Embedding, &mut self.positional_embedding),
        ];
        for layer in &mut self.layers {
            match layer {
                LayerParams::Linear(p) | LayerParams::Mlp(p) => {
                    out.push((TensorKind::Weight, &mut p.weight));
                    out.push((TensorKind::Bias, &mut p.bias));
                }
                LayerParams::Transformer(p) => {
                    out.push((TensorKind::Norm, &mut p.ln1.gamma));
                    out.push((TensorKind::Norm, &mut p.ln1.beta));
                    out.push((TensorKind::Weight, &mut p.attn.wq));
                    out.push((TensorKind::Bias, &mut p.attn.bq));
                    out.push((TensorKind::Weight, &mut p.attn.wk));
                    out.push((TensorKind::Bias, &mut p.attn.bk));
                    out.push((TensorKind::Weight, &mut p.attn.wv));
                    out.push((TensorKind::Bias, &mut p.attn.bv));
                    out.push((TensorKind::Weight, &mut p.attn.wo));
                    out.push((TensorKind::Bias, &mut p.attn.bo));
                    out.push((TensorKind::Norm, &mut p.ln2.gamma));
                    out.push((TensorKind::Norm, &mut p.ln2.beta));
                    out.push((TensorKind::Weight, &mut p.ffn.w1));
                    out.push((TensorKind::Bias, &mut p.ffn.b1));
                    out.push((TensorKind::Weight, &mut p.ffn.w2));
                    out.push((TensorKind::Bias, &mut p.ffn.b2));
                }
            }
        }
        out.push((TensorKind::Weight, &mut self.out_proj.weight));
        out.push((TensorKind::Bias, &mut self.out_proj.bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.all_finite())
    }
}

pub struct SuffixCache {
    pub(crate) layer: usize,
    pub(crate) rows: usize,
    pub(crate) caches: Vec<LayerCache>,
    pub(crate) pooled: Vec<f64>,
}

pub struct EncodeCache {
    pub(crate) ids: Vec<usize>,
    pub(crate) suffix: SuffixCache,
}

#[derive(Clone, Debug)]
pub struct SiameseModel {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl SiameseModel {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<SiameseModel> {
        config.validate()?;
        let params = ModelParams::init(&config, vocab.len(), seed);
        Ok(SiameseModel {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(
        config: EncoderConfig,
        vocab: Vocabulary,
        params: ModelParams,
    ) -> Result<SiameseModel> {
        config.validate()?;
        let model = SiameseModel {
            config,
            vocab,
            params,
        };
        model.validate_params()?;
        Ok(model)
    }

    fn validate_params(&self) -> Result<()> {
        let reference = ModelParams::init(&self.config, self.vocab.len(), 0);
        let expected = reference.tensors();
        let actual = self.params.tensors();
        if expected.len() != actual.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, _, want), (got_name, _, got)) in expected.iter().zip(&actual) {
            if name != got_name {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: expected {name}, found {got_name}"
                )));
            }
            if !want.same_shape(got) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {}, found {}",
                    want.shape_string(),
                    got.shape_string()
                )));
            }
            if !got.all_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers
    }

    /// Layer-0 representation: token embedding plus learned position embedding.
    pub(crate) fn embed(&self, seq: &TokenSequence) -> Result<Matrix> {
        if seq.is_empty() {
            return Err(Error::EmptyText);
        }
        if seq.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                got: seq.len(),
                max: self.config.max_seq,
            });
        }
        let d = self.config.dim;
        let mut x = Matrix::zeros(seq.len(), d);
        for (pos, &id) in seq.ids.iter().enumerate() {
            if id >= self.vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab.len(),
                });
            }
            let tok = self.params.token_embedding.row(id);
            let ps = self.params.positional_embedding.row(pos);
            let row = x.row_mut(pos);
            for j in 0..d {
                row[j] = tok[j] + ps[j];
            }
        }
        Ok(x)
    }

    /// Run embedding and layers 1..=layer; layer 0 returns the input embeddings.
    pub fn encode_prefix(&self, seq: &TokenSequence, layer: usize) -> Result<Representation> {
        if layer > self.config.layers {
            return Err(Error::InvalidLayer {
                layer,
                max: self.config.layers,
            });
        }
        let mut x = self.embed(seq)?;
        if !x.all_finite() {
            return Err(Error::NonFinite { layer: 0 });
        }
        for t in 1..=layer {
            x = layer_forward(&self.params.layers[t - 1], &x, self.config.heads).0;
            if !x.all_finite() {
                return Err(Error::NonFinite { layer: t });
            }
        }
        Ok(Representation { data: x, layer })
    }

    pub(crate) fn suffix_forward_cached(
        &self,
        data: &Matrix,
        layer: usize,
    ) -> Result<(Vec<f64>, SuffixCache)> {
        if layer > self.config.layers {
            return Err(Error::InvalidLayer {
                layer,
                max: self.config.layers,
            });
        }
        if data.cols() != self.config.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("S x {}", self.config.dim),
                got: data.shape_string(),
            });
        }
        let mut x = data.clone();
        let mut caches = Vec::with_capacity(self.config.layers - layer);
        for t in layer + 1..=self.config.layers {
            let (y, c) = layer_forward(&self.params.layers[t - 1], &x, self.config.heads);
            if !y.all_finite() {
                return Err(Error::NonFinite { layer: t });
            }
            caches.push(c);
            x = y;
        }
        let pooled = x.mean_rows();
        let mut out = self.params.out_proj.bias.row(0).to_vec();
        for (k, slot) in out.iter_mut().enumerate() {
            *slot += dot(self.params.out_proj.weight.row(k), &pooled);
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                layer: self.config.layers,
            });
        }
        Ok((
            out,
            SuffixCache {
                layer,
                rows: data.rows(),
                caches,
                pooled,
            },
        ))
    }

    /// Exact gradient of `seed . suffix(x)` with respect to the representation
    /// the cache was built from. Parameter gradients accumulate into `grads`
    /// when provided.
    pub(crate) fn suffix_backward(
        &self,
        cache: &SuffixCache,
        seed: &[f64],
        mut grads: Option<&mut ModelParams>,
    ) -> Matrix {
        let d = self.config.dim;
        let mut dpooled = vec![0.0; d];
        for (k, &sv) in seed.iter().enumerate() {
            let wrow = self.params.out_proj.weight.row(k);
            for (dp, &w) in dpooled.iter_mut().zip(wrow) {
                *dp += sv * w;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            for (k, &sv) in seed.iter().enumerate() {
                let grow = g.out_proj.weight.row_mut(k);
                for (gw, &pv) in grow.iter_mut().zip(&cache.pooled) {
                    *gw += sv * pv;
                }
            }
            for (gb, &sv) in g.out_proj.bias.row_mut(0).iter_mut().zip(seed) {
                *gb += sv;
            }
        }
        let inv = 1.0 / cache.rows as f64;
        let mut dx = Matrix::from_fn(cache.rows, d, |_, j| dpooled[j] * inv);
        for (idx, c) in cache.caches.iter().enumerate().rev() {
            let t = cache.layer + 1 + idx;
            let lg = grads.as_deref_mut().map(|g| &mut g.layers[t - 1]);
            dx = layer_backward(&self.params.layers[t - 1], c, &dx, self.config.heads, lg);
        }
        dx
    }

    /// Run layers layer+1..=L, mean-pool, project.
    pub fn encode_suffix(&self, rep: &Representation) -> Result<Embedding> {
        let (values, _) = self.suffix_forward_cached(&rep.data, rep.layer)?;
        Ok(Embedding {
            values,
            shifted: false,
        })
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Embedding> {
        let x0 = self.embed(seq)?;
        let (values, _) = self.suffix_forward_cached(&x0, 0)?;
        Ok(Embedding {
            values,
            shifted: false,
        })
    }

    /// e(c) = e'(c) - e'(r_c) with the padding reference of matching length.
    pub fn encode_shifted(&self, seq: &TokenSequence) -> Result<Embedding> {
        let raw = self.encode(seq)?;
        let reference = self.encode(&reference_for(seq))?;
        let values = raw
            .values
            .iter()
            .zip(&reference.values)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Embedding {
            values,
            shifted: true,
        })
    }

    pub(crate) fn encode_cached(&self, seq: &TokenSequence) -> Result<(Vec<f64>, EncodeCache)> {
        let x0 = self.embed(seq)?;
        let (out, suffix) = self.suffix_forward_cached(&x0, 0)?;
        Ok((
            out,
            EncodeCache {
                ids: seq.ids.clone(),
                suffix,
            },
        ))
    }

    pub(crate) fn encode_backward(
        &self,
        cache: &EncodeCache,
        seed: &[f64],
        grads: &mut ModelParams,
    ) {
        let dx0 = self.suffix_backward(&cache.suffix, seed, Some(grads));
        for (pos, &id) in cache.ids.iter().enumerate() {
            let row = dx0.row(pos).to_vec();
            for (g, &v) in grads.token_embedding.row_mut(id).iter_mut().zip(row.iter()) {
                *g += v;
            }
            for (g, &v) in grads
                .positional_embedding
                .row_mut(pos)
                .iter_mut()
                .zip(row.iter())
            {
                *g += v;
            }
        }
    }

    pub fn score(
        &self,
        a: &TokenSequence,
        b: &TokenSequence,
        mode: ScoreMode,
        shifted: bool,
    ) -> Result<f64> {
        let (ea, eb) = if shifted {
            (self.encode_shifted(a)?, self.encode_shifted(b)?)
        } else {
            (self.encode(a)?, self.encode(b)?)
        };
        score_embeddings(&ea.values, &eb.values, mode)
    }
}

pub fn score_embeddings(ea: &[f64], eb: &[f64], mode: ScoreMode) -> Result<f64> {
    match mode {
        ScoreMode::Dot => Ok(dot(ea, eb)),
        ScoreMode::Cosine => {
            let na = norm(ea);
            let nb = norm(eb);
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm);
            }
            Ok(dot(ea, eb) / (na * nb))
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracle arithmetic stays explicit
mod tests {
    use super::layers::{gelu, LayerParams};
    use super::*;
    use crate::testutil;
    use crate::vocab::PAD_ID;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
    }

    #[test]
    fn layer_zero_is_token_plus_position_embedding() {
        let model = testutil::model(Architecture::Linear, 8, 1, 1, 3);
        let seq = testutil::seq(&model, "hot coffee");
        let rep = model.encode_prefix(&seq, 0).unwrap();
        for (pos, &id) in seq.ids.iter().enumerate() {
            for j in 0..8 {
                let expected = model.params.token_embedding.get(id, j)
                    + model.params.positional_embedding.get(pos, j);
                assert_eq!(rep.data.get(pos, j), expected);
            }
        }
    }

    #[test]
    fn composition_identity_holds_at_every_layer() {
        for arch in [
            Architecture::Linear,
            Architecture::Mlp,
            Architecture::Transformer,
        ] {
            let model = testutil::model(arch, 8, 3, 2, 11);
            let seq = testutil::seq(&model, "the cat sat on a mat");
            let full = model.encode(&seq).unwrap();
            for layer in 0..=3 {
                let rep = model.encode_prefix(&seq, layer).unwrap();
                let via = model.encode_suffix(&rep).unwrap();
                assert!(
                    max_abs_diff(&full.values, &via.values) <= 1e-12,
                    "arch {arch:?} layer {layer}"
                );
            }
        }
    }

    #[test]
    fn suffix_at_top_layer_is_pooling_and_projection_only() {
        let model = testutil::model(Architecture::Transformer, 8, 2, 2, 5);
        let seq = testutil::seq(&model, "hot coffee is good");
        let rep = model.encode_prefix(&seq, 2).unwrap();
        let out = model.encode_suffix(&rep).unwrap();
        let pooled = rep.data.mean_rows();
        for k in 0..8 {
            let expected = dot(model.params.out_proj.weight.row(k), &pooled)
                + model.params.out_proj.bias.get(0, k);
            assert!((out.values[k] - expected).abs() <= 1e-15);
        }
    }

    #[test]
    fn mlp_forward_matches_hand_computed_arithmetic() {
        // Two tokens, dim 2, one MLP layer; every weight set by hand.
        let mut model = testutil::model(Architecture::Mlp, 2, 1, 1, 0);
        let w = Matrix::from_rows(&[vec![0.5, -0.25], vec![1.0, 0.75]]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.1, -0.2]).unwrap();
        match &mut model.params.layers[0] {
            LayerParams::Mlp(p) => {
                p.weight = w.clone();
                p.bias = b.clone();
            }
            _ => unreachable!(),
        }
        model.params.out_proj.weight =
            Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        model.params.out_proj.bias = Matrix::from_vec(1, 2, vec![0.05, 0.0]).unwrap();

        let seq = testutil::seq(&model, "hot coffee");
        let rep = model.encode_prefix(&seq, 0).unwrap();
        let out = model.encode(&seq).unwrap();

        // Manual forward with scalar arithmetic.
        let mut hidden = [[0.0f64; 2]; 2];
        for s in 0..2 {
            for o in 0..2 {
                let pre = rep.data.get(s, 0) * w.get(o, 0)
                    + rep.data.get(s, 1) * w.get(o, 1)
                    + b.get(0, o);
                hidden[s][o] = gelu(pre);
            }
        }
        let pooled = [
            (hidden[0][0] + hidden[1][0]) / 2.0,
            (hidden[0][1] + hidden[1][1]) / 2.0,
        ];
        let expected = [
            pooled[0] + 2.0 * pooled[1] + 0.05,
            0.5 * pooled[1] - pooled[0],
        ];
        assert!(max_abs_diff(&out.values, &expected) <= 1e-14);
    }

    /// Independent re-implementation of one pre-norm transformer block.
    fn reference_block_forward(model: &SiameseModel, x: &Matrix) -> Matrix {
        let p = match &model.params.layers[0] {
            LayerParams::Transformer(p) => p,
            _ => unreachable!(),
        };
        let s = x.rows();
        let d = x.cols();
        let heads = model.config.heads;
        let dh = d / heads;
        let eps = 1e-5;

        let layer_norm = |input: &Matrix, gamma: &Matrix, beta: &Matrix| -> Matrix {
            let mut out = Matrix::zeros(input.rows(), d);
            for i in 0..input.rows() {
                let row = input.row(i);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                for j in 0..d {
                    let xh = (row[j] - mean) / (var + eps).sqrt();
                    out.set(i, j, gamma.get(0, j) * xh + beta.get(0, j));
                }
            }
            out
        };
        let project = |input: &Matrix, w: &Matrix, b: &Matrix| -> Matrix {
            let mut out = Matrix::zeros(input.rows(), w.rows());
            for i in 0..input.rows() {
                for o in 0..w.rows() {
                    let mut acc = b.get(0, o);
                    for j in 0..input.cols() {
                        acc += input.get(i, j) * w.get(o, j);
                    }
                    out.set(i, o, acc);
                }
            }
            out
        };

        let ln1 = layer_norm(x, &p.ln1.gamma, &p.ln1.beta);
        let q = project(&ln1, &p.attn.wq, &p.attn.bq);
        let k = project(&ln1, &p.attn.wk, &p.attn.bk);
        let v = project(&ln1, &p.attn.wv, &p.attn.bv);
        let mut ctx = Matrix::zeros(s, d);
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..s {
                let mut scores = vec![0.0; s];
                for j in 0..s {
                    let mut acc = 0.0;
                    for m in 0..dh {
                        acc += q.get(i, c0 + m) * k.get(j, c0 + m);
                    }
                    scores[j] = acc / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights: Vec<f64> = scores.iter().map(|&v| (v - max).exp()).collect();
                let z: f64 = weights.iter().sum();
                for w in &mut weights {
                    *w /= z;
                }
                for m in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..s {
                        acc += weights[j] * v.get(j, c0 + m);
                    }
                    ctx.set(i, c0 + m, acc);
                }
            }
        }
        let attn_out = project(&ctx, &p.attn.wo, &p.attn.bo);
        let x1 = x.add(&attn_out);
        let ln2 = layer_norm(&x1, &p.ln2.gamma, &p.ln2.beta);
        let pre = project(&ln2, &p.ffn.w1, &p.ffn.b1);
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = gelu(*v);
        }
        let ffn_out = project(&act, &p.ffn.w2, &p.ffn.b2);
        x1.add(&ffn_out)
    }

    #[test]
    fn transformer_layer_matches_independent_forward() {
        let model = testutil::model(Architecture::Transformer, 8, 1, 2, 17);
        let seq = testutil::seq(&model, "a dog ran over the hill");
        let x0 = model.encode_prefix(&seq, 0).unwrap();
        let got = model.encode_prefix(&seq, 1).unwrap();
        let expected = reference_block_forward(&model, &x0.data);
        assert!(max_abs_diff(got.data.data(), expected.data()) <= 1e-12);
    }

    #[test]
    fn shifted_reference_is_exactly_zero() {
        for arch in [
            Architecture::Linear,
            Architecture::Mlp,
            Architecture::Transformer,
        ] {
            let model = testutil::model(arch, 8, 2, 2, 23);
            let seq = testutil::seq(&model, "hot coffee is not very good");
            let reference = reference_for(&seq);
            let shifted = model.encode_shifted(&reference).unwrap();
            assert!(shifted.values.iter().all(|&v| v == 0.0));
            let s = model.score(&seq, &reference, ScoreMode::Dot, true).unwrap();
            assert!(s.abs() <= 1e-10);
        }
    }

    #[test]
    fn shifted_encode_is_componentwise_difference() {
        let model = testutil::model(Architecture::Transformer, 8, 2, 2, 29);
        let seq = testutil::seq(&model, "bad tea is hot");
        let raw = model.encode(&seq).unwrap();
        let reference = model.encode(&reference_for(&seq)).unwrap();
        let shifted = model.encode_shifted(&seq).unwrap();
        for ((&s, &r), &w) in shifted
            .values
            .iter()
            .zip(&raw.values)
            .zip(&reference.values)
        {
            assert_eq!(s, r - w);
        }
    }

    #[test]
    fn score_is_symmetric() {
        let model = testutil::model(Architecture::Transformer, 8, 2, 2, 31);
        let a = testutil::seq(&model, "the cat sat");
        let b = testutil::seq(&model, "a dog ran over the hill");
        let ab = model.score(&a, &b, ScoreMode::Dot, true).unwrap();
        let ba = model.score(&b, &a, ScoreMode::Dot, true).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn identity_encoder_score_matches_manual_dot_product() {
        // Linear layer set to identity, output projection set to identity:
        // the embedding is the mean of the input embeddings.
        let mut model = testutil::model(Architecture::Linear, 4, 1, 1, 7);
        match &mut model.params.layers[0] {
            LayerParams::Linear(p) => {
                p.weight = Matrix::eye(4);
                p.bias = Matrix::zeros(1, 4);
            }
            _ => unreachable!(),
        }
        model.params.out_proj.weight = Matrix::eye(4);
        model.params.out_proj.bias = Matrix::zeros(1, 4);

        let a = testutil::seq(&model, "hot coffee");
        let b = testutil::seq(&model, "bad tea");
        let mean = |seq: &TokenSequence| -> Vec<f64> {
            let mut acc = [0.0; 4];
            for (pos, &id) in seq.ids.iter().enumerate() {
                for j in 0..4 {
                    acc[j] += model.params.token_embedding.get(id, j)
                        + model.params.positional_embedding.get(pos, j);
                }
            }
            acc.iter().map(|v| v / seq.len() as f64).collect()
        };
        let expected = dot(&mean(&a), &mean(&b));
        let got = model.score(&a, &b, ScoreMode::Dot, false).unwrap();
        assert!((got - expected).abs() <= 1e-14);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let model = testutil::model(Architecture::Transformer, 8, 3, 2, 41);
        let texts = [
            "the cat sat on a warm mat",
            "a dog ran over the cold hill",
            "hot coffee is not very good",
        ];
        for text in texts {
            let seq = testutil::seq(&model, text);
            let first = model.encode(&seq).unwrap();
            let second = model.encode(&seq).unwrap();
            assert_eq!(first.values, second.values);
            assert!(first.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = testutil::model(Architecture::Transformer, 8, 2, 2, 77);
        let b = testutil::model(Architecture::Transformer, 8, 2, 2, 77);
        for ((_, _, ta), (_, _, tb)) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn invalid_layer_and_length_are_rejected() {
        let model = testutil::model(Architecture::Linear, 4, 2, 1, 1);
        let seq = testutil::seq(&model, "the cat");
        assert!(matches!(
            model.encode_prefix(&seq, 3),
            Err(Error::InvalidLayer { layer: 3, max: 2 })
        ));
        let long = TokenSequence {
            ids: vec![PAD_ID; 40],
            tokens: vec!["<pad>".into(); 40],
            source: String::new(),
        };
        assert!(matches!(
            model.encode_prefix(&long, 0),
            Err(Error::SequenceTooLong { got: 40, max: 16 })
        ));
    }

    #[test]
    fn cosine_of_zero_embedding_is_an_error() {
        let model = testutil::model(Architecture::Linear, 4, 1, 1, 2);
        let seq = testutil::seq(&model, "the cat");
        let reference = reference_for(&seq);
        assert!(matches!(
            model.score(&seq, &reference, ScoreMode::Cosine, true),
            Err(Error::ZeroNorm)
        ));
    }
}
