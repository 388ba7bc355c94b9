//! Statistical analyses of attribution outputs: value distributions,
//! cumulative prediction curves, token-to-word merging, and POS-relation
//! aggregation over externally supplied tags.
//!
//! Two different sortings are used deliberately: cumulative curves rank cells
//! by absolute value, POS share tables rank by signed value. Ties break by
//! row-major cell index so every analysis is deterministic.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::attribution::AttributionOutput;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A sentence with word-level POS tags and the word -> token-span alignment.
#[derive(Clone, Debug)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
    /// (start, len) token span per word; spans partition the token axis.
    pub spans: Vec<(usize, usize)>,
}

impl TaggedSentence {
    pub fn new(words: Vec<String>, tags: Vec<String>, spans: Vec<(usize, usize)>) -> Result<Self> {
        if words.len() != tags.len() || words.len() != spans.len() {
            return Err(Error::BadAlignment(format!(
                "{} words, {} tags, {} spans",
                words.len(),
                tags.len(),
                spans.len()
            )));
        }
        Ok(TaggedSentence { words, tags, spans })
    }

    /// One token per word, in order.
    pub fn one_to_one(words: Vec<String>, tags: Vec<String>) -> Result<Self> {
        let spans = (0..words.len()).map(|i| (i, 1)).collect();
        TaggedSentence::new(words, tags, spans)
    }

    pub fn token_len(&self) -> usize {
        self.spans.iter().map(|(_, len)| len).sum()
    }
}

fn validate_partition(spans: &[(usize, usize)], total: usize) -> Result<()> {
    let mut cursor = 0;
    for &(start, len) in spans {
        if start != cursor || len == 0 {
            return Err(Error::BadAlignment(format!(
                "span ({start}, {len}) does not continue at token {cursor}"
            )));
        }
        cursor += len;
    }
    if cursor != total {
        return Err(Error::BadAlignment(format!(
            "spans cover {cursor} tokens, axis has {total}"
        )));
    }
    Ok(())
}

/// Parse a CoNLL-like tags file: `word<TAB>tag` lines, blank line between
/// sentences.
pub fn load_tags_file(path: &str) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let content = std::fs::read_to_string(path)?;
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            if !words.is_empty() {
                sentences.push((std::mem::take(&mut words), std::mem::take(&mut tags)));
            }
            continue;
        }
        let mut fields = line.split('\t');
        let word = fields.next().unwrap_or_default();
        let tag = fields.next().ok_or_else(|| Error::Data {
            path: path.to_string(),
            line: idx + 1,
            message: "expected word<TAB>tag".into(),
        })?;
        words.push(word.to_string());
        tags.push(tag.to_string());
    }
    if !words.is_empty() {
        sentences.push((words, tags));
    }
    if sentences.is_empty() {
        return Err(Error::EmptyDataset(path.to_string()));
    }
    Ok(sentences)
}

#[derive(Clone, Debug)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct AttributionHistogram {
    pub bins: Vec<HistogramBin>,
    /// Share of strictly negative cells.
    pub negative_fraction: f64,
    pub total_cells: usize,
}

/// Histogram over all token-token cells of the outputs at the given layer.
pub fn attribution_histogram(
    outputs: &[AttributionOutput],
    layer: usize,
    bins: usize,
) -> Result<AttributionHistogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig("need at least one bin".into()));
    }
    let values: Vec<f64> = outputs
        .iter()
        .filter(|o| o.layer == layer)
        .flat_map(|o| o.matrix.data().iter().copied())
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no attribution outputs at layer {layer}"
        )));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - min) / width) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    let negative = values.iter().filter(|&&v| v < 0.0).count();
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: min + width * i as f64,
            hi: if i + 1 == bins {
                max
            } else {
                min + width * (i + 1) as f64
            },
            count,
        })
        .collect();
    Ok(AttributionHistogram {
        bins,
        negative_fraction: negative as f64 / values.len() as f64,
        total_cells: values.len(),
    })
}

#[derive(Clone, Debug)]
pub struct CumulativeCurve {
    /// Common fraction grid (percent steps).
    pub fractions: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Final cumulative point per example: attribution_sum / score.
    pub endpoints: Vec<f64>,
    /// Examples dropped because their score was exactly zero.
    pub excluded_zero_score: usize,
}

/// Per example, sort cells by |value| descending, accumulate and divide by
/// the prediction; average over examples on a 1..=100 percent grid.
pub fn cumulative_prediction_curve(outputs: &[AttributionOutput]) -> Result<CumulativeCurve> {
    let grid: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let mut endpoints = Vec::new();
    let mut excluded = 0usize;
    for out in outputs {
        if out.score == 0.0 {
            excluded += 1;
            continue;
        }
        let mut cells: Vec<(usize, f64)> = out.matrix.data().iter().copied().enumerate().collect();
        cells.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
        let n = cells.len();
        let mut running = 0.0;
        let mut cumulative = Vec::with_capacity(n);
        for &(_, v) in &cells {
            running += v;
            cumulative.push(running / out.score);
        }
        let sampled: Vec<f64> = (1..=100)
            .map(|k| {
                let m = (k * n).div_ceil(100).max(1);
                cumulative[m - 1]
            })
            .collect();
        endpoints.push(cumulative[n - 1]);
        curves.push(sampled);
    }
    if curves.is_empty() {
        return Err(Error::InvalidConfig(
            "no attribution outputs with nonzero score".into(),
        ));
    }
    let count = curves.len() as f64;
    let mut mean = vec![0.0; grid.len()];
    for curve in &curves {
        for (m, &v) in mean.iter_mut().zip(curve) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut std = vec![0.0; grid.len()];
    for curve in &curves {
        for ((s, &v), &m) in std.iter_mut().zip(curve).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / count).sqrt();
    }
    Ok(CumulativeCurve {
        fractions: grid,
        mean,
        std,
        endpoints,
        excluded_zero_score: excluded,
    })
}

/// Merge a token-token matrix to word-word cells by averaging each
/// token-span block.
pub fn merge_tokens_to_words(
    matrix: &Matrix,
    align_a: &[(usize, usize)],
    align_b: &[(usize, usize)],
) -> Result<Matrix> {
    validate_partition(align_a, matrix.rows())?;
    validate_partition(align_b, matrix.cols())?;
    let mut out = Matrix::zeros(align_a.len(), align_b.len());
    for (wi, &(ra, la)) in align_a.iter().enumerate() {
        for (wj, &(rb, lb)) in align_b.iter().enumerate() {
            let mut acc = 0.0;
            for i in ra..ra + la {
                let row = matrix.row(i);
                for cell in &row[rb..rb + lb] {
                    acc += *cell;
                }
            }
            out.set(wi, wj, acc / (la * lb) as f64);
        }
    }
    Ok(out)
}

/// Unordered POS tag pair; the dot product is symmetric, so NN-VB and VB-NN
/// are the same relation.
pub type Relation = (String, String);

pub fn relation(tag_a: &str, tag_b: &str) -> Relation {
    if tag_a <= tag_b {
        (tag_a.to_string(), tag_b.to_string())
    } else {
        (tag_b.to_string(), tag_a.to_string())
    }
}

/// A word-level attribution matrix with the tags of both sentences.
#[derive(Clone, Debug)]
pub struct WordAttribution {
    pub matrix: Matrix,
    pub tags_a: Vec<String>,
    pub tags_b: Vec<String>,
    pub score: f64,
}

impl WordAttribution {
    /// Merge a token-level output against two tagged sentences.
    pub fn from_output(
        output: &AttributionOutput,
        tagged_a: &TaggedSentence,
        tagged_b: &TaggedSentence,
    ) -> Result<WordAttribution> {
        let matrix = merge_tokens_to_words(&output.matrix, &tagged_a.spans, &tagged_b.spans)?;
        Ok(WordAttribution {
            matrix,
            tags_a: tagged_a.tags.clone(),
            tags_b: tagged_b.tags.clone(),
            score: output.score,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.tags_a.len() != self.matrix.rows() || self.tags_b.len() != self.matrix.cols() {
            return Err(Error::MissingTag(format!(
                "matrix is {} but tags cover {}x{} words",
                self.matrix.shape_string(),
                self.tags_a.len(),
                self.tags_b.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ShareRow {
    pub fraction: f64,
    /// Relation shares, descending, summing to one.
    pub shares: Vec<(Relation, f64)>,
}

/// For each fraction, select the top cells by signed value across the corpus
/// and report the share of each unordered tag-pair relation among them.
pub fn pos_relation_shares(
    items: &[WordAttribution],
    top_fractions: &[f64],
) -> Result<Vec<ShareRow>> {
    if items.is_empty() || top_fractions.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one attribution and one fraction".into(),
        ));
    }
    for f in top_fractions {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::InvalidConfig(format!("fraction {f} outside (0, 1]")));
        }
    }
    let mut cells: Vec<(f64, usize, Relation)> = Vec::new();
    for item in items {
        item.validate()?;
        for wi in 0..item.matrix.rows() {
            for wj in 0..item.matrix.cols() {
                let rel = relation(&item.tags_a[wi], &item.tags_b[wj]);
                cells.push((item.matrix.get(wi, wj), cells.len(), rel));
            }
        }
    }
    // Signed value descending; ties by construction index.
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

    let mut rows = Vec::with_capacity(top_fractions.len());
    for &fraction in top_fractions {
        let take = ((fraction * cells.len() as f64).ceil() as usize).clamp(1, cells.len());
        let mut counts: BTreeMap<Relation, usize> = BTreeMap::new();
        for (_, _, rel) in &cells[..take] {
            *counts.entry(rel.clone()).or_insert(0) += 1;
        }
        let mut shares: Vec<(Relation, f64)> = counts
            .into_iter()
            .map(|(rel, c)| (rel, c as f64 / take as f64))
            .collect();
        shares.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows.push(ShareRow { fraction, shares });
    }
    Ok(rows)
}

/// Fraction of the prediction recovered by cells whose relation is in the set.
pub fn pos_restricted_prediction(
    item: &WordAttribution,
    relations: &BTreeSet<Relation>,
) -> Result<f64> {
    item.validate()?;
    if item.score == 0.0 {
        return Err(Error::ZeroScore);
    }
    let mut acc = 0.0;
    for wi in 0..item.matrix.rows() {
        for wj in 0..item.matrix.cols() {
            if relations.contains(&relation(&item.tags_a[wi], &item.tags_b[wj])) {
                acc += item.matrix.get(wi, wj);
            }
        }
    }
    Ok(acc / item.score)
}
