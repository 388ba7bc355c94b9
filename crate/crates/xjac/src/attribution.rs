//! Feature-pair attribution via integrated Jacobians.
//!
//! The prediction of a Siamese model, s = e(a)^T e(b), is decomposed over
//! pairs of input features by
//!
//!   A_ij = (a - r_a)_i (J_a^T J_b)_ij (b - r_b)_j
//!
//! where J is the Jacobian of the encoder tail averaged along the straight
//! interpolation path from the reference representation to the input
//! representation. With shifted embeddings the reference scores zero against
//! everything, all cross terms vanish, and the sum over A equals the
//! prediction exactly in the limit of infinitely many interpolation steps.
//! The gap |s - sum(A)| at finite step count N is the attribution error
//! reported alongside every output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffMap, Suffix};
use crate::error::{Error, Result};
use crate::model::{Representation, SiameseModel};
use crate::tensor::{dot, Matrix};
use crate::vocab::{reference_for, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Midpoint,
    Left,
    Trapezoid,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Scheme::Midpoint => "midpoint",
            Scheme::Left => "left",
            Scheme::Trapezoid => "trapezoid",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "midpoint" => Ok(Scheme::Midpoint),
            "left" => Ok(Scheme::Left),
            "trapezoid" => Ok(Scheme::Trapezoid),
            other => Err(Error::InvalidConfig(format!("unknown scheme {other:?}"))),
        }
    }
}

/// A straight integration path from a reference representation to an input
/// representation at the same layer.
#[derive(Clone, Debug)]
pub struct PathSpec {
    pub reference: Representation,
    pub input: Representation,
    pub steps: usize,
    pub scheme: Scheme,
}

impl PathSpec {
    pub fn new(
        reference: Representation,
        input: Representation,
        steps: usize,
        scheme: Scheme,
    ) -> Result<PathSpec> {
        if reference.layer != input.layer {
            return Err(Error::ShapeMismatch {
                expected: format!("layer {}", input.layer),
                got: format!("layer {}", reference.layer),
            });
        }
        if !reference.data.same_shape(&input.data) {
            return Err(Error::ShapeMismatch {
                expected: input.data.shape_string(),
                got: reference.data.shape_string(),
            });
        }
        let min_steps = match scheme {
            Scheme::Trapezoid => 2,
            _ => 1,
        };
        if steps < min_steps {
            return Err(Error::InvalidSteps {
                steps,
                scheme: scheme.to_string(),
            });
        }
        Ok(PathSpec {
            reference,
            input,
            steps,
            scheme,
        })
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.steps {
            return Err(Error::StepOutOfRange {
                index: n,
                steps: self.steps,
            });
        }
        Ok(())
    }

    /// Position of the n-th node (1-based) on [0, 1].
    pub fn alpha(&self, n: usize) -> Result<f64> {
        self.check_index(n)?;
        let nn = self.steps as f64;
        Ok(match self.scheme {
            Scheme::Midpoint => (n as f64 - 0.5) / nn,
            Scheme::Left => (n as f64 - 1.0) / nn,
            Scheme::Trapezoid => (n as f64 - 1.0) / (nn - 1.0),
        })
    }

    /// Quadrature weight of the n-th node; weights sum to one.
    pub fn weight(&self, n: usize) -> Result<f64> {
        self.check_index(n)?;
        let nn = self.steps as f64;
        Ok(match self.scheme {
            Scheme::Midpoint | Scheme::Left => 1.0 / nn,
            Scheme::Trapezoid => {
                if n == 1 || n == self.steps {
                    0.5 / (nn - 1.0)
                } else {
                    1.0 / (nn - 1.0)
                }
            }
        })
    }

    pub(crate) fn point_matrix(&self, n: usize) -> Result<Matrix> {
        let alpha = self.alpha(n)?;
        let r = &self.reference.data;
        let x = &self.input.data;
        let data = r
            .data()
            .iter()
            .zip(x.data())
            .map(|(&rv, &xv)| rv + alpha * (xv - rv))
            .collect();
        Matrix::from_vec(r.rows(), r.cols(), data)
    }
}

/// r + alpha_n (x - r) for the n-th node (1-based).
pub fn interpolation_point(path: &PathSpec, n: usize) -> Result<Representation> {
    Ok(Representation {
        data: path.point_matrix(n)?,
        layer: path.input.layer,
    })
}

/// Path-averaged Jacobian of the encoder tail (out_dim x S*D).
#[derive(Clone, Debug)]
pub struct IntegratedJacobian {
    pub matrix: Matrix,
    pub layer: usize,
    pub steps: usize,
    pub scheme: Scheme,
}

/// Scheme-weighted sum of `eval` over the interpolation nodes.
///
/// Nodes are processed in batches of `batch`; batches may evaluate
/// concurrently but partial sums are combined in fixed node order, so the
/// result is identical bit for bit regardless of thread count.
fn integrate_over_path<F>(path: &PathSpec, batch: usize, eval: F) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync,
{
    let indices: Vec<usize> = (1..=path.steps).collect();
    let chunk = batch.max(1);
    let partials: Vec<Result<Matrix>> = indices
        .par_chunks(chunk)
        .map(|ids| {
            let mut acc: Option<Matrix> = None;
            for &n in ids {
                let point = path.point_matrix(n)?;
                let value = eval(&point)?;
                let w = path.weight(n)?;
                match acc.as_mut() {
                    None => {
                        let mut first = value;
                        first.scale(w);
                        acc = Some(first);
                    }
                    Some(sum) => sum.add_scaled(&value, w),
                }
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect();

    let mut total: Option<Matrix> = None;
    for partial in partials {
        let partial = partial?;
        match total.as_mut() {
            None => total = Some(partial),
            Some(sum) => sum.add_assign(&partial),
        }
    }
    Ok(total.expect("at least one step"))
}

/// Approximate the path integral of the tail Jacobian along `path`.
pub fn integrated_jacobian(
    map: &dyn DiffMap,
    path: &PathSpec,
    batch: usize,
) -> Result<IntegratedJacobian> {
    let matrix = integrate_over_path(path, batch, |point| map.jacobian(point))?;
    Ok(IntegratedJacobian {
        matrix,
        layer: path.input.layer,
        steps: path.steps,
        scheme: path.scheme,
    })
}

fn delta(input: &Representation, reference: &Representation) -> Vec<f64> {
    input
        .data
        .data()
        .iter()
        .zip(reference.data.data())
        .map(|(&x, &r)| x - r)
        .collect()
}

/// The full feature-pair matrix A_ij = (a-r_a)_i (Ja^T Jb)_ij (b-r_b)_j.
pub fn attribution_matrix(
    ja: &IntegratedJacobian,
    jb: &IntegratedJacobian,
    a_rep: &Representation,
    r_a: &Representation,
    b_rep: &Representation,
    r_b: &Representation,
) -> Result<Matrix> {
    if ja.layer != jb.layer {
        return Err(Error::ShapeMismatch {
            expected: format!("layer {}", ja.layer),
            got: format!("layer {}", jb.layer),
        });
    }
    if ja.matrix.rows() != jb.matrix.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} output rows", ja.matrix.rows()),
            got: format!("{} output rows", jb.matrix.rows()),
        });
    }
    if ja.matrix.cols() != a_rep.flat_len() || jb.matrix.cols() != b_rep.flat_len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", ja.matrix.cols(), jb.matrix.cols()),
            got: format!("{}x{}", a_rep.flat_len(), b_rep.flat_len()),
        });
    }
    let da = delta(a_rep, r_a);
    let db = delta(b_rep, r_b);
    let inner = ja.matrix.matmul_at(&jb.matrix);
    let mut full = Matrix::zeros(da.len(), db.len());
    for (i, &dai) in da.iter().enumerate() {
        let src = inner.row(i);
        let dst = full.row_mut(i);
        for (j, (&m, &dv)) in src.iter().zip(&db).enumerate() {
            dst[j] = dai * m * dv;
        }
    }
    Ok(full)
}

/// Sum D x D blocks of the full matrix into one cell per token pair.
/// Accumulation is row-major inside each block, so the total is preserved
/// exactly when the blocks are themselves summed row-major.
pub fn reduce_token_token(full: &Matrix, d: usize) -> Result<Matrix> {
    if d == 0 || !full.rows().is_multiple_of(d) || !full.cols().is_multiple_of(d) {
        return Err(Error::ShapeMismatch {
            expected: format!("dimensions divisible by {d}"),
            got: full.shape_string(),
        });
    }
    let sa = full.rows() / d;
    let sb = full.cols() / d;
    let mut out = Matrix::zeros(sa, sb);
    for si in 0..sa {
        for sj in 0..sb {
            let mut acc = 0.0;
            for di in 0..d {
                let row = full.row(si * d + di);
                for dj in 0..d {
                    acc += row[sj * d + dj];
                }
            }
            out.set(si, sj, acc);
        }
    }
    Ok(out)
}

fn matrix_sum(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for &v in m.data() {
        acc += v;
    }
    acc
}

/// Token-token reduction computed directly from Ja^T Jb without materializing
/// the full feature-pair matrix. Cell values and accumulation order match
/// [`reduce_token_token`] applied to [`attribution_matrix`] bit for bit.
fn streamed_token_token(inner: &Matrix, da: &[f64], db: &[f64], d: usize) -> Matrix {
    let sa = da.len() / d;
    let sb = db.len() / d;
    let mut out = Matrix::zeros(sa, sb);
    for si in 0..sa {
        for sj in 0..sb {
            let mut acc = 0.0;
            for di in 0..d {
                let i = si * d + di;
                let row = inner.row(i);
                for dj in 0..d {
                    let j = sj * d + dj;
                    acc += da[i] * row[j] * db[j];
                }
            }
            out.set(si, sj, acc);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct AttributionOptions {
    pub steps: usize,
    pub scheme: Scheme,
    /// Interpolation nodes are evaluated in batches of this size.
    pub batch: usize,
    /// Also materialize the full (S_a*D) x (S_b*D) feature-pair matrix.
    pub full_matrix: bool,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        AttributionOptions {
            steps: 100,
            scheme: Scheme::Midpoint,
            batch: 16,
            full_matrix: false,
        }
    }
}

/// One attribution result: the token-token matrix, the prediction it
/// decomposes, and the approximation error.
#[derive(Clone, Debug)]
pub struct AttributionOutput {
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
    pub layer: usize,
    pub steps: usize,
    pub scheme: Scheme,
    pub score: f64,
    pub attribution_sum: f64,
    pub error: f64,
    /// Token-token matrix, S_a x S_b.
    pub matrix: Matrix,
    /// Full feature-pair matrix, only materialized on request.
    pub full_matrix: Option<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct AttributionJson {
    tokens_a: Vec<String>,
    tokens_b: Vec<String>,
    layer: usize,
    steps: usize,
    scheme: Scheme,
    score: f64,
    attribution_sum: f64,
    error: f64,
    matrix: Vec<Vec<f64>>,
}

impl AttributionOutput {
    pub fn to_json_string(&self) -> Result<String> {
        let dto = AttributionJson {
            tokens_a: self.tokens_a.clone(),
            tokens_b: self.tokens_b.clone(),
            layer: self.layer,
            steps: self.steps,
            scheme: self.scheme,
            score: self.score,
            attribution_sum: self.attribution_sum,
            error: self.error,
            matrix: (0..self.matrix.rows())
                .map(|i| self.matrix.row(i).to_vec())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json_str(text: &str) -> Result<AttributionOutput> {
        let dto: AttributionJson = serde_json::from_str(text)?;
        let matrix = Matrix::from_rows(&dto.matrix)?;
        Ok(AttributionOutput {
            tokens_a: dto.tokens_a,
            tokens_b: dto.tokens_b,
            layer: dto.layer,
            steps: dto.steps,
            scheme: dto.scheme,
            score: dto.score,
            attribution_sum: dto.attribution_sum,
            error: dto.error,
            matrix,
            full_matrix: None,
        })
    }
}

/// Decompose the pair prediction into a token-token attribution matrix at the
/// given hook layer.
///
/// The tail is taken shifted, e(.) = e'(.) - e'(r), so the reference maps to
/// zero and the sum over the matrix converges to the prediction. A degenerate
/// input that equals its own reference yields an all-zero matrix with score
/// and error zero; that is a valid output, not an error.
pub fn attribute(
    model: &SiameseModel,
    a: &TokenSequence,
    b: &TokenSequence,
    layer: usize,
    opts: &AttributionOptions,
) -> Result<AttributionOutput> {
    if !model.config.adjusted {
        return Err(Error::NotAdjusted);
    }
    let r_a_seq = reference_for(a);
    let r_b_seq = reference_for(b);
    let a_rep = model.encode_prefix(a, layer)?;
    let r_a = model.encode_prefix(&r_a_seq, layer)?;
    let b_rep = model.encode_prefix(b, layer)?;
    let r_b = model.encode_prefix(&r_b_seq, layer)?;

    let suffix = Suffix::new(model, layer)?;
    let path_a = PathSpec::new(r_a.clone(), a_rep.clone(), opts.steps, opts.scheme)?;
    let path_b = PathSpec::new(r_b.clone(), b_rep.clone(), opts.steps, opts.scheme)?;
    let ja = integrated_jacobian(&suffix, &path_a, opts.batch)?;
    let jb = integrated_jacobian(&suffix, &path_b, opts.batch)?;

    let da = delta(&a_rep, &r_a);
    let db = delta(&b_rep, &r_b);
    let inner = ja.matrix.matmul_at(&jb.matrix);
    let d = model.config.dim;
    let matrix = streamed_token_token(&inner, &da, &db, d);
    let full_matrix = if opts.full_matrix {
        Some(attribution_matrix(&ja, &jb, &a_rep, &r_a, &b_rep, &r_b)?)
    } else {
        None
    };

    // Shifted embeddings evaluated through the same tail.
    let ea = shifted_embedding(&suffix, &a_rep, &r_a)?;
    let eb = shifted_embedding(&suffix, &b_rep, &r_b)?;
    let score = dot(&ea, &eb);
    let attribution_sum = matrix_sum(&matrix);
    let error = (score - attribution_sum).abs();

    Ok(AttributionOutput {
        tokens_a: a.tokens.clone(),
        tokens_b: b.tokens.clone(),
        layer,
        steps: opts.steps,
        scheme: opts.scheme,
        score,
        attribution_sum,
        error,
        matrix,
        full_matrix,
    })
}

fn shifted_embedding(
    suffix: &Suffix<'_>,
    rep: &Representation,
    reference: &Representation,
) -> Result<Vec<f64>> {
    let raw = suffix.forward(&rep.data)?;
    let shift = suffix.forward(&reference.data)?;
    Ok(raw.iter().zip(&shift).map(|(&x, &r)| x - r).collect())
}

/// Residual of the general four-term ansatz under unshifted scoring:
/// |sum(A) - [f(a,b) - f(a,r_b) - f(r_a,b) + f(r_a,r_b)]|.
///
/// This validates the decomposition independently of the zero-reference
/// shift; the residual vanishes as the number of steps grows, for any
/// reference choice.
pub fn decomposition_check(
    model: &SiameseModel,
    a: &TokenSequence,
    b: &TokenSequence,
    layer: usize,
    steps: usize,
) -> Result<f64> {
    let a_rep = model.encode_prefix(a, layer)?;
    let r_a = model.encode_prefix(&reference_for(a), layer)?;
    let b_rep = model.encode_prefix(b, layer)?;
    let r_b = model.encode_prefix(&reference_for(b), layer)?;
    let suffix = Suffix::new(model, layer)?;
    decomposition_check_with_references(
        &suffix,
        &a_rep,
        &r_a,
        &b_rep,
        &r_b,
        steps,
        Scheme::Midpoint,
        16,
    )
}

/// Four-term check over explicit (possibly arbitrary nonzero) references.
#[allow(clippy::too_many_arguments)]
pub fn decomposition_check_with_references(
    map: &dyn DiffMap,
    a_rep: &Representation,
    r_a: &Representation,
    b_rep: &Representation,
    r_b: &Representation,
    steps: usize,
    scheme: Scheme,
    batch: usize,
) -> Result<f64> {
    let path_a = PathSpec::new(r_a.clone(), a_rep.clone(), steps, scheme)?;
    let path_b = PathSpec::new(r_b.clone(), b_rep.clone(), steps, scheme)?;
    let ja = integrated_jacobian(map, &path_a, batch)?;
    let jb = integrated_jacobian(map, &path_b, batch)?;

    let da = delta(a_rep, r_a);
    let db = delta(b_rep, r_b);
    let inner = ja.matrix.matmul_at(&jb.matrix);
    let mut total = 0.0;
    for (i, &dai) in da.iter().enumerate() {
        let row = inner.row(i);
        for (&m, &dbj) in row.iter().zip(&db) {
            total += dai * m * dbj;
        }
    }

    let ea = map.forward(&a_rep.data)?;
    let era = map.forward(&r_a.data)?;
    let eb = map.forward(&b_rep.data)?;
    let erb = map.forward(&r_b.data)?;
    let four_term = dot(&ea, &eb) - dot(&ea, &erb) - dot(&era, &eb) + dot(&era, &erb);
    Ok((total - four_term).abs())
}

/// Single-input integrated gradients over a's features with b held fixed
/// (the one-input baseline the pairwise method generalizes).
///
/// Returns (a - r_a)_i times the path-averaged gradient of
/// x -> suffix(x) . e_shifted(b); the sum converges to f(a,b) - f(r_a,b).
pub fn integrated_gradients_single(
    model: &SiameseModel,
    a: &TokenSequence,
    b: &TokenSequence,
    layer: usize,
    steps: usize,
    scheme: Scheme,
    batch: usize,
) -> Result<Vec<f64>> {
    if !model.config.adjusted {
        return Err(Error::NotAdjusted);
    }
    let a_rep = model.encode_prefix(a, layer)?;
    let r_a = model.encode_prefix(&reference_for(a), layer)?;
    let b_emb = model.encode_shifted(b)?;
    let suffix = Suffix::new(model, layer)?;

    let path = PathSpec::new(r_a.clone(), a_rep.clone(), steps, scheme)?;
    let avg_gradient = integrate_over_path(&path, batch, |point| suffix.vjp(point, &b_emb.values))?;

    let da = delta(&a_rep, &r_a);
    Ok(avg_gradient
        .data()
        .iter()
        .zip(&da)
        .map(|(&g, &d)| g * d)
        .collect())
}

/// One row of a convergence sweep: attribution error statistics for a fixed
/// (layer, step-count) cell over a set of pairs.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub layer: usize,
    pub steps: usize,
    pub mean_abs_error: f64,
    pub std_abs_error: f64,
    /// Error relative to max(1, |score|), averaged over pairs.
    pub mean_rel_error: f64,
}

/// Attribution error per (layer, N) cell; rows come out in the given layer
/// and step order, pairs evaluated in input order.
pub fn convergence_sweep(
    model: &SiameseModel,
    pairs: &[(TokenSequence, TokenSequence)],
    layers: &[usize],
    steps_list: &[usize],
    scheme: Scheme,
    batch: usize,
) -> Result<Vec<SweepRow>> {
    if pairs.is_empty() || layers.is_empty() || steps_list.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one pair, one layer and one step count".into(),
        ));
    }
    let mut rows = Vec::with_capacity(layers.len() * steps_list.len());
    for &layer in layers {
        for &steps in steps_list {
            let opts = AttributionOptions {
                steps,
                scheme,
                batch,
                full_matrix: false,
            };
            let mut errors = Vec::with_capacity(pairs.len());
            let mut rels = Vec::with_capacity(pairs.len());
            for (a, b) in pairs {
                let out = attribute(model, a, b, layer, &opts)?;
                errors.push(out.error);
                rels.push(out.error / out.score.abs().max(1.0));
            }
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            let var =
                errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
            let mean_rel = rels.iter().sum::<f64>() / rels.len() as f64;
            rows.push(SweepRow {
                layer,
                steps,
                mean_abs_error: mean,
                std_abs_error: var.sqrt(),
                mean_rel_error: mean_rel,
            });
        }
    }
    Ok(rows)
}
