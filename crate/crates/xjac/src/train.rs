//! Fine-tuning of the toy Siamese encoder on scored sentence pairs, with
//! Spearman evaluation.
//!
//! Two objectives mirror the adjusted / non-adjusted model variants: mean
//! squared error on the dot product of shifted embeddings, or on the cosine
//! of raw embeddings. The optimizer is decoupled-weight-decay Adam with
//! linear warmup. Training is single-threaded and bit-reproducible under a
//! fixed seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ScoreMode, SiameseModel, TensorKind};
use crate::tensor::dot;
use crate::vocab::{reference_for, tokenize, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub text_a: String,
    pub text_b: String,
    /// Similarity label in [0, 1].
    pub label: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// MSE on the dot product of shifted embeddings (adjusted model).
    Dot,
    /// MSE on the cosine of raw embeddings (non-adjusted model).
    Cosine,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Objective::Dot),
            "cosine" => Ok(Objective::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of total steps used for linear warmup.
    pub warmup_fraction: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.1,
            warmup_fraction: 0.1,
            objective: Objective::Dot,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "weight decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(
                "warmup fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a 3-column TSV of (text_a, text_b, score). A header line is detected
/// by a non-numeric third field and skipped; labels must lie in [0, 1].
pub fn load_dataset(path: &str) -> Result<Vec<Pair>> {
    let content = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    let mut first_data_line = true;
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data {
                path: path.to_string(),
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = match fields[2].trim().parse::<f64>() {
            Ok(v) => v,
            Err(_) if first_data_line => {
                // Header row.
                first_data_line = false;
                continue;
            }
            Err(_) => {
                return Err(Error::Data {
                    path: path.to_string(),
                    line: line_no,
                    message: format!("score field {:?} is not a number", fields[2]),
                });
            }
        };
        first_data_line = false;
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::Data {
                path: path.to_string(),
                line: line_no,
                message: format!("score {label} outside [0, 1]"),
            });
        }
        if fields[0].trim().is_empty() || fields[1].trim().is_empty() {
            return Err(Error::Data {
                path: path.to_string(),
                line: line_no,
                message: "empty text field".into(),
            });
        }
        pairs.push(Pair {
            text_a: fields[0].to_string(),
            text_b: fields[1].to_string(),
            label,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(path.to_string()));
    }
    Ok(pairs)
}

struct AdamW {
    m: ModelParams,
    v: ModelParams,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(params: &ModelParams) -> AdamW {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let beta1 = self.beta1;
        let beta2 = self.beta2;
        let eps = self.eps;

        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        for (idx, (kind, p)) in param_tensors.iter_mut().enumerate() {
            let g = grad_tensors[idx].2;
            let m = &mut m_tensors[idx].1;
            let v = &mut v_tensors[idx].1;
            // Decoupled decay on weight matrices only, not on biases,
            // norms or embeddings.
            let decay = if *kind == TensorKind::Weight {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                if decay != 1.0 {
                    pd[i] *= decay;
                }
                let gi = gd[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean squared error per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Predicted score and loss seed for one pair; accumulates gradients.
fn pair_step(
    model: &SiameseModel,
    a: &TokenSequence,
    b: &TokenSequence,
    label: f64,
    objective: Objective,
    inv_batch: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    match objective {
        Objective::Dot => {
            let (ea_raw, cache_a) = model.encode_cached(a)?;
            let (era, cache_ra) = model.encode_cached(&reference_for(a))?;
            let (eb_raw, cache_b) = model.encode_cached(b)?;
            let (erb, cache_rb) = model.encode_cached(&reference_for(b))?;
            let ea: Vec<f64> = ea_raw.iter().zip(&era).map(|(&x, &r)| x - r).collect();
            let eb: Vec<f64> = eb_raw.iter().zip(&erb).map(|(&x, &r)| x - r).collect();
            let pred = dot(&ea, &eb);
            let residual = pred - label;
            let g = 2.0 * residual * inv_batch;
            let seed_a: Vec<f64> = eb.iter().map(|&v| g * v).collect();
            let seed_b: Vec<f64> = ea.iter().map(|&v| g * v).collect();
            let neg_a: Vec<f64> = seed_a.iter().map(|&v| -v).collect();
            let neg_b: Vec<f64> = seed_b.iter().map(|&v| -v).collect();
            model.encode_backward(&cache_a, &seed_a, grads);
            model.encode_backward(&cache_ra, &neg_a, grads);
            model.encode_backward(&cache_b, &seed_b, grads);
            model.encode_backward(&cache_rb, &neg_b, grads);
            Ok(residual * residual)
        }
        Objective::Cosine => {
            let (ea, cache_a) = model.encode_cached(a)?;
            let (eb, cache_b) = model.encode_cached(b)?;
            let na = dot(&ea, &ea).sqrt();
            let nb = dot(&eb, &eb).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm);
            }
            let raw = dot(&ea, &eb);
            let pred = raw / (na * nb);
            let residual = pred - label;
            let g = 2.0 * residual * inv_batch;
            let seed_a: Vec<f64> = ea
                .iter()
                .zip(&eb)
                .map(|(&av, &bv)| g * (bv / (na * nb) - pred * av / (na * na)))
                .collect();
            let seed_b: Vec<f64> = ea
                .iter()
                .zip(&eb)
                .map(|(&av, &bv)| g * (av / (na * nb) - pred * bv / (nb * nb)))
                .collect();
            model.encode_backward(&cache_a, &seed_a, grads);
            model.encode_backward(&cache_b, &seed_b, grads);
            Ok(residual * residual)
        }
    }
}

/// Minimize MSE between predicted and labeled scores. Returns the per-epoch
/// mean loss trace. Deterministic under a fixed seed.
pub fn train(model: &mut SiameseModel, data: &[Pair], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training data".into()));
    }
    let tokenized: Vec<(TokenSequence, TokenSequence, f64)> = data
        .iter()
        .map(|p| {
            Ok((
                tokenize(&p.text_a, &model.vocab)?,
                tokenize(&p.text_b, &model.vocab)?,
                p.label,
            ))
        })
        .collect::<Result<_>>()?;

    let n = tokenized.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup_steps = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(&model.params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_squared = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let lr = if warmup_steps > 0 && step <= warmup_steps {
                cfg.learning_rate * step as f64 / warmup_steps as f64
            } else {
                cfg.learning_rate
            };
            let inv_batch = 1.0 / batch.len() as f64;
            let mut grads = model.params.zeros_like();
            let mut batch_squared = 0.0;
            for &i in batch {
                let (a, b, label) = &tokenized[i];
                batch_squared +=
                    pair_step(model, a, b, *label, cfg.objective, inv_batch, &mut grads)?;
            }
            if !batch_squared.is_finite() {
                return Err(Error::NanLoss {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            epoch_squared += batch_squared;
            optimizer.step(&mut model.params, &grads, lr, cfg.weight_decay);
        }
        epoch_losses.push(epoch_squared / n as f64);
    }
    Ok(TrainReport { epoch_losses })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut pos = 0;
    while pos < order.len() {
        let mut end = pos + 1;
        while end < order.len() && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        // Average rank for the tie group, 1-based.
        let rank = (pos + 1 + end) as f64 / 2.0;
        for &idx in &order[pos..end] {
            ranks[idx] = rank;
        }
        pos = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::BadSampleLengths {
            a: a.len(),
            b: b.len(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Score every pair in the given mode and report Spearman against labels.
pub fn evaluate(
    model: &SiameseModel,
    data: &[Pair],
    mode: ScoreMode,
    shifted: bool,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for pair in data {
        let a = tokenize(&pair.text_a, &model.vocab)?;
        let b = tokenize(&pair.text_b, &model.vocab)?;
        predictions.push(model.score(&a, &b, mode, shifted)?);
        labels.push(pair.label);
    }
    spearman(&predictions, &labels)
}

const KEYWORDS: [&str; 24] = [
    "anchor", "basil", "cedar", "delta", "ember", "falcon", "garnet", "harbor", "indigo",
    "juniper", "kestrel", "lagoon", "marble", "nectar", "onyx", "prairie", "quartz", "raven",
    "saffron", "tundra", "umber", "velvet", "willow", "zephyr",
];

/// Synthetic separable corpus: each text is a sorted set of `grades - 1`
/// keywords and the label is the fraction of keywords the two texts share.
/// With `grades = 2` this degenerates to the binary shared-keyword / disjoint
/// corpus. The keyword pool is kept small so toy encoders can separate it.
pub fn synthetic_corpus(n_pairs: usize, grades: usize, seed: u64) -> Vec<Pair> {
    let grades = grades.max(2);
    let k = grades - 1;
    let pool_size = (2 * k).max(8).min(KEYWORDS.len());
    assert!(2 * k <= pool_size, "grades too large for the keyword pool");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut pool: Vec<&str> = KEYWORDS[..pool_size].to_vec();
        pool.shuffle(&mut rng);
        let a_words: Vec<&str> = pool[..k].to_vec();
        let overlap = rng.random_range(0..=k);
        let mut b_words: Vec<&str> = a_words[..overlap].to_vec();
        b_words.extend_from_slice(&pool[k..2 * k - overlap]);
        let label = overlap as f64 / k as f64;
        pairs.push(Pair {
            text_a: render_sentence(&a_words),
            text_b: render_sentence(&b_words),
            label,
        });
    }
    pairs
}

fn render_sentence(words: &[&str]) -> String {
    let mut words: Vec<&str> = words.to_vec();
    words.sort_unstable();
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::testutil;
    use crate::vocab::Vocabulary;
    use crate::SiameseModel;
    use proptest::prelude::*;

    fn write_tsv(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn dataset_parses_plain_rows() {
        let f = write_tsv("a cat\tthe cat\t0.9\n");
        let pairs = load_dataset(f.path().to_str().unwrap()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].text_a, "a cat");
        assert_eq!(pairs[0].text_b, "the cat");
        assert_eq!(pairs[0].label, 0.9);
    }

    #[test]
    fn dataset_skips_a_header_line() {
        let f = write_tsv("text_a\ttext_b\tscore\na cat\tthe cat\t0.5\n");
        let pairs = load_dataset(f.path().to_str().unwrap()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].label, 0.5);
    }

    #[test]
    fn dataset_rejects_out_of_range_label_with_line_number() {
        let f = write_tsv("a\tb\t0.1\nc\td\t0.2\ne\tf\t1.5\n");
        match load_dataset(f.path().to_str().unwrap()) {
            Err(Error::Data { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("1.5"));
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_malformed_rows_and_empty_files() {
        let f = write_tsv("only two\tfields\n");
        assert!(matches!(
            load_dataset(f.path().to_str().unwrap()),
            Err(Error::Data { line: 1, .. })
        ));
        let empty = write_tsv("");
        assert!(matches!(
            load_dataset(empty.path().to_str().unwrap()),
            Err(Error::EmptyDataset(_))
        ));
    }

    fn corpus_vocab(pairs: &[Pair]) -> Vocabulary {
        let texts: Vec<&str> = pairs
            .iter()
            .flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()])
            .collect();
        Vocabulary::build(&texts, 1).unwrap()
    }

    fn toy_model(pairs: &[Pair], seed: u64) -> SiameseModel {
        let mut config = testutil::config(Architecture::Transformer, 8, 2, 2);
        config.max_seq = 16;
        SiameseModel::new(config, corpus_vocab(pairs), seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let pairs = synthetic_corpus(24, 2, 7);
        let mut model = toy_model(&pairs, 1);
        let before: Vec<Vec<f64>> = model
            .params
            .tensors()
            .iter()
            .map(|(_, _, t)| t.data().to_vec())
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &pairs, &cfg).unwrap();
        for (i, (_, _, t)) in model.params.tensors().iter().enumerate() {
            assert_eq!(t.data(), before[i].as_slice());
        }
        for loss in &report.epoch_losses {
            assert_eq!(*loss, report.epoch_losses[0]);
        }
    }

    #[test]
    fn training_reduces_loss_on_the_separable_corpus() {
        let pairs = synthetic_corpus(200, 2, 11);
        let mut model = toy_model(&pairs, 3);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &pairs, &cfg).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < first, "loss trace {:?}", report.epoch_losses);
    }

    #[test]
    fn cosine_objective_trains_too() {
        let pairs = synthetic_corpus(48, 2, 13);
        let mut model = toy_model(&pairs, 5);
        model.config.adjusted = false;
        let cfg = TrainConfig {
            epochs: 2,
            objective: Objective::Cosine,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &pairs, &cfg).unwrap();
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(*report.epoch_losses.last().unwrap() < report.epoch_losses[0]);
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let pairs = synthetic_corpus(40, 3, 17);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut first = toy_model(&pairs, 9);
        let report_a = train(&mut first, &pairs, &cfg).unwrap();
        let mut second = toy_model(&pairs, 9);
        let report_b = train(&mut second, &pairs, &cfg).unwrap();
        assert_eq!(report_a.epoch_losses, report_b.epoch_losses);
        for ((_, _, ta), (_, _, tb)) in first
            .params
            .tensors()
            .iter()
            .zip(second.params.tensors().iter())
        {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn shifted_reference_score_survives_training() {
        let pairs = synthetic_corpus(32, 2, 19);
        let mut model = toy_model(&pairs, 21);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &pairs, &cfg).unwrap();
        for pair in pairs.iter().take(8) {
            let seq = tokenize(&pair.text_a, &model.vocab).unwrap();
            let reference = reference_for(&seq);
            let s = model.score(&seq, &reference, ScoreMode::Dot, true).unwrap();
            assert!(s.abs() <= 1e-10, "score against reference {s}");
        }
    }

    #[test]
    fn exploding_predictions_abort_with_diagnostics() {
        let pairs = synthetic_corpus(8, 2, 23);
        let mut config = testutil::config(Architecture::Linear, 8, 1, 1);
        config.max_seq = 16;
        let mut model = SiameseModel::new(config, corpus_vocab(&pairs), 25).unwrap();
        // Distinct huge embeddings keep the forward pass finite while the
        // score dot product overflows.
        let rows = model.params.token_embedding.rows();
        model.params.token_embedding =
            crate::tensor::Matrix::from_fn(rows, 8, |i, _| 1e195 * (i + 1) as f64);
        let cfg = TrainConfig::default();
        match train(&mut model, &pairs, &cfg) {
            Err(Error::NanLoss { epoch: 1, batch: 1 }) => {}
            other => panic!("expected NanLoss at epoch 1 batch 1, got {other:?}"),
        }
    }

    #[test]
    fn spearman_matches_hand_cases() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(Error::BadSampleLengths { a: 2, b: 1 })
        ));
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::ConstantInput)
        ));
    }

    #[test]
    fn spearman_tie_handling_matches_brute_force_average_ranks() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [2.0, 1.0, 3.0, 4.0];
        // Brute-force oracle: explicit average ranks, then Pearson.
        let brute_ranks = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&x| {
                    let below = v.iter().filter(|&&y| y < x).count() as f64;
                    let equal = v.iter().filter(|&&y| y == x).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let ra = brute_ranks(&a);
        let rb = brute_ranks(&b);
        let n = 4.0;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(&x, &y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|&x| (x - ma) * (x - ma)).sum();
        let vb: f64 = rb.iter().map(|&y| (y - mb) * (y - mb)).sum();
        let expected = cov / (va * vb).sqrt();
        let got = spearman(&a, &b).unwrap();
        assert!((got - expected).abs() <= 1e-12);
    }

    #[test]
    fn evaluate_is_perfect_when_labels_follow_predictions() {
        // Oracle-stub flavor: build labels as a strictly increasing function
        // of the model's own predictions.
        let pairs = synthetic_corpus(20, 2, 27);
        let model = toy_model(&pairs, 29);
        let mut relabeled = Vec::new();
        for p in &pairs {
            let a = tokenize(&p.text_a, &model.vocab).unwrap();
            let b = tokenize(&p.text_b, &model.vocab).unwrap();
            let pred = model.score(&a, &b, ScoreMode::Dot, true).unwrap();
            relabeled.push(Pair {
                text_a: p.text_a.clone(),
                text_b: p.text_b.clone(),
                label: 1.0 / (1.0 + (-pred).exp()),
            });
        }
        let rho = evaluate(&model, &relabeled, ScoreMode::Dot, true).unwrap();
        assert!((rho - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn untrained_model_has_weak_correlation() {
        // Measured on the graded corpus, where squared-embedding leakage from
        // shared keywords is diluted across cross terms.
        let pairs = synthetic_corpus(200, 5, 31);
        let model = toy_model(&pairs, 33);
        let rho = evaluate(&model, &pairs, ScoreMode::Dot, true).unwrap();
        assert!(rho.abs() < 0.3, "untrained correlation {rho}");
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_graded() {
        let a = synthetic_corpus(30, 5, 41);
        let b = synthetic_corpus(30, 5, 41);
        assert_eq!(a, b);
        for pair in &a {
            let scaled = pair.label * 4.0;
            assert!((scaled - scaled.round()).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&pair.label));
        }
        assert!(a.iter().any(|p| p.label == 0.0));
        assert!(a.iter().any(|p| p.label == 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

        #[test]
        fn spearman_is_invariant_under_increasing_transforms(
            values in prop::collection::vec(-50.0f64..50.0, 3..24),
            labels in prop::collection::vec(0.0f64..1.0, 24),
        ) {
            let n = values.len();
            let labels = &labels[..n];
            prop_assume!(spearman(&values, labels).is_ok());
            let transformed: Vec<f64> = values.iter().map(|&v| (v / 25.0).exp() * 3.0 + 1.0).collect();
            let base = spearman(&values, labels).unwrap();
            let moved = spearman(&transformed, labels).unwrap();
            prop_assert!((base - moved).abs() <= 1e-12);
        }
    }
}
