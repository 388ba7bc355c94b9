//! Encoder layers: position-wise linear, position-wise MLP, and a pre-norm
//! transformer block. Every layer keeps its sequence shape S x D so any layer
//! boundary can serve as an attribution hook point.
//!
//! Each forward returns a cache from which the backward pass computes exact
//! input gradients (and, when requested, parameter gradients). All
//! nonlinearities are smooth so path integrals over representations converge.

use crate::tensor::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LinearParams {
    /// out_dim x in_dim
    pub weight: Matrix,
    /// 1 x out_dim
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug)]
pub struct TransformerBlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub enum LayerParams {
    /// y = x W^T + b, applied per position.
    Linear(LinearParams),
    /// y = gelu(x W^T + b), applied per position.
    Mlp(LinearParams),
    Transformer(Box<TransformerBlockParams>),
}

pub enum LayerCache {
    Linear { x: Matrix },
    Mlp { x: Matrix, pre: Matrix },
    Transformer(Box<TransformerCache>),
}

pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub struct TransformerCache {
    pub x: Matrix,
    pub ln1: LayerNormCache,
    pub ln1_out: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per-head softmax weights, each S x S.
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub x1: Matrix,
    pub ln2: LayerNormCache,
    pub ln2_out: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// y = x W^T + b for x: S x in, W: out x in, b: 1 x out.
pub fn affine(x: &Matrix, weight: &Matrix, bias: &Matrix) -> Matrix {
    let mut y = x.matmul_bt(weight);
    let b = bias.row(0);
    for i in 0..y.rows() {
        for (v, &bv) in y.row_mut(i).iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

pub fn linear_forward(p: &LinearParams, x: &Matrix) -> Matrix {
    affine(x, &p.weight, &p.bias)
}

fn colsum_into(dy: &Matrix, acc: &mut Matrix) {
    let acc_row = acc.row_mut(0);
    for i in 0..dy.rows() {
        for (a, &v) in acc_row.iter_mut().zip(dy.row(i)) {
            *a += v;
        }
    }
}

fn layer_norm_forward(p: &LayerNormParams, x: &Matrix) -> (Matrix, LayerNormCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let gamma = p.gamma.row(0);
    let beta = p.beta.row(0);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xh[j] = h;
            o[j] = gamma[j] * h + beta[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    p: &LayerNormParams,
    cache: &LayerNormCache,
    dy: &Matrix,
    mut grads: Option<&mut LayerNormParams>,
) -> Matrix {
    let d = dy.cols();
    let gamma = p.gamma.row(0);
    let mut dx = Matrix::zeros(dy.rows(), d);
    for i in 0..dy.rows() {
        let dy_row = dy.row(i);
        let xh = cache.xhat.row(i);
        let inv = cache.inv_std[i];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let g = dy_row[j] * gamma[j];
            m1 += g;
            m2 += g * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            let g = dy_row[j] * gamma[j];
            dx_row[j] = inv * (g - m1 - xh[j] * m2);
        }
        if let Some(g) = grads.as_deref_mut() {
            let dgamma = g.gamma.row_mut(0);
            for j in 0..d {
                dgamma[j] += dy_row[j] * xh[j];
            }
            let dbeta = g.beta.row_mut(0);
            for j in 0..d {
                dbeta[j] += dy_row[j];
            }
        }
    }
    dx
}

fn attention_forward(
    p: &AttentionParams,
    x: &Matrix,
    heads: usize,
) -> (Matrix, Matrix, Matrix, Matrix, Vec<Matrix>, Matrix) {
    let s = x.rows();
    let d = x.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = affine(x, &p.wq, &p.bq);
    let k = affine(x, &p.wk, &p.bk);
    let v = affine(x, &p.wv, &p.bv);

    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Matrix::zeros(s, d);
    for h in 0..heads {
        let c0 = h * dh;
        let mut p_h = Matrix::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[c0..c0 + dh];
            let row = p_h.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[c0..c0 + dh];
                let mut acc = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                let score = acc * scale;
                *slot = score;
                if score > max {
                    max = score;
                }
            }
            let mut sum = 0.0;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= sum;
            }
        }
        for i in 0..s {
            for j in 0..s {
                let w = p_h.get(i, j);
                let vj = &v.row(j)[c0..c0 + dh];
                let ci = &mut ctx.row_mut(i)[c0..c0 + dh];
                for (c, &vv) in ci.iter_mut().zip(vj.iter()) {
                    *c += w * vv;
                }
            }
        }
        probs.push(p_h);
    }

    let y = affine(&ctx, &p.wo, &p.bo);
    (y, q, k, v, probs, ctx)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    p: &AttentionParams,
    cache: &TransformerCache,
    dy: &Matrix,
    heads: usize,
    mut grads: Option<&mut AttentionParams>,
) -> Matrix {
    let s = dy.rows();
    let d = dy.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = &cache.ln1_out;

    // Output projection: y = ctx wo^T + bo
    let dctx = dy.matmul(&p.wo);
    if let Some(g) = grads.as_mut() {
        g.wo.add_assign(&dy.matmul_at(&cache.ctx));
        colsum_into(dy, &mut g.bo);
    }

    let mut dq = Matrix::zeros(s, d);
    let mut dk = Matrix::zeros(s, d);
    let mut dv = Matrix::zeros(s, d);
    for h in 0..heads {
        let c0 = h * dh;
        let p_h = &cache.probs[h];
        // dP[i][j] = dctx_i . v_j ; dv_j += sum_i P[i][j] dctx_i
        let mut dprobs = Matrix::zeros(s, s);
        for i in 0..s {
            let dci = &dctx.row(i)[c0..c0 + dh];
            for j in 0..s {
                let vj = &cache.v.row(j)[c0..c0 + dh];
                let mut acc = 0.0;
                for (a, b) in dci.iter().zip(vj) {
                    acc += a * b;
                }
                dprobs.set(i, j, acc);
                let w = p_h.get(i, j);
                let dvj = &mut dv.row_mut(j)[c0..c0 + dh];
                for (slot, &a) in dvj.iter_mut().zip(dci) {
                    *slot += w * a;
                }
            }
        }
        // Softmax backward per row, then dQ = dS K / sqrt(dh), dK = dS^T Q / sqrt(dh)
        for i in 0..s {
            let prow = p_h.row(i);
            let dprow = dprobs.row(i);
            let mut dot = 0.0;
            for (a, b) in prow.iter().zip(dprow) {
                dot += a * b;
            }
            for j in 0..s {
                let ds = prow[j] * (dprow[j] - dot) * scale;
                let kj = &cache.k.row(j)[c0..c0 + dh];
                let dqi = &mut dq.row_mut(i)[c0..c0 + dh];
                for (slot, &kv) in dqi.iter_mut().zip(kj.iter()) {
                    *slot += ds * kv;
                }
                let qi = &cache.q.row(i)[c0..c0 + dh];
                let dkj = &mut dk.row_mut(j)[c0..c0 + dh];
                for (slot, &qv) in dkj.iter_mut().zip(qi.iter()) {
                    *slot += ds * qv;
                }
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        g.wq.add_assign(&dq.matmul_at(x));
        colsum_into(&dq, &mut g.bq);
        g.wk.add_assign(&dk.matmul_at(x));
        colsum_into(&dk, &mut g.bk);
        g.wv.add_assign(&dv.matmul_at(x));
        colsum_into(&dv, &mut g.bv);
    }

    let mut dx = dq.matmul(&p.wq);
    dx.add_assign(&dk.matmul(&p.wk));
    dx.add_assign(&dv.matmul(&p.wv));
    dx
}

pub fn layer_forward(params: &LayerParams, x: &Matrix, heads: usize) -> (Matrix, LayerCache) {
    match params {
        LayerParams::Linear(p) => {
            let y = linear_forward(p, x);
            (y, LayerCache::Linear { x: x.clone() })
        }
        LayerParams::Mlp(p) => {
            let pre = linear_forward(p, x);
            let mut y = pre.clone();
            for v in y.data_mut() {
                *v = gelu(*v);
            }
            (y, LayerCache::Mlp { x: x.clone(), pre })
        }
        LayerParams::Transformer(p) => {
            let (ln1_out, ln1) = layer_norm_forward(&p.ln1, x);
            let (attn_out, q, k, v, probs, ctx) = attention_forward(&p.attn, &ln1_out, heads);
            let x1 = x.add(&attn_out);
            let (ln2_out, ln2) = layer_norm_forward(&p.ln2, &x1);
            let ffn_pre = affine(&ln2_out, &p.ffn.w1, &p.ffn.b1);
            let mut ffn_act = ffn_pre.clone();
            for val in ffn_act.data_mut() {
                *val = gelu(*val);
            }
            let ffn_out = affine(&ffn_act, &p.ffn.w2, &p.ffn.b2);
            let y = x1.add(&ffn_out);
            let cache = TransformerCache {
                x: x.clone(),
                ln1,
                ln1_out,
                q,
                k,
                v,
                probs,
                ctx,
                x1,
                ln2,
                ln2_out,
                ffn_pre,
                ffn_act,
            };
            (y, LayerCache::Transformer(Box::new(cache)))
        }
    }
}

/// Exact gradient of a layer with respect to its input. When `grads` is given,
/// parameter gradients are accumulated into it (same enum layout as the params).
pub fn layer_backward(
    params: &LayerParams,
    cache: &LayerCache,
    dy: &Matrix,
    heads: usize,
    grads: Option<&mut LayerParams>,
) -> Matrix {
    match (params, cache) {
        (LayerParams::Linear(p), LayerCache::Linear { x }) => {
            if let Some(LayerParams::Linear(g)) = grads {
                g.weight.add_assign(&dy.matmul_at(x));
                colsum_into(dy, &mut g.bias);
            }
            dy.matmul(&p.weight)
        }
        (LayerParams::Mlp(p), LayerCache::Mlp { x, pre }) => {
            let mut dpre = dy.clone();
            for (g, &u) in dpre.data_mut().iter_mut().zip(pre.data()) {
                *g *= gelu_prime(u);
            }
            if let Some(LayerParams::Mlp(g)) = grads {
                g.weight.add_assign(&dpre.matmul_at(x));
                colsum_into(&dpre, &mut g.bias);
            }
            dpre.matmul(&p.weight)
        }
        (LayerParams::Transformer(p), LayerCache::Transformer(c)) => {
            let gblock = match grads {
                Some(LayerParams::Transformer(g)) => Some(g.as_mut()),
                _ => None,
            };
            transformer_backward(p, c, dy, heads, gblock)
        }
        _ => unreachable!("layer cache does not match layer params"),
    }
}

fn transformer_backward(
    p: &TransformerBlockParams,
    c: &TransformerCache,
    dy: &Matrix,
    heads: usize,
    mut grads: Option<&mut TransformerBlockParams>,
) -> Matrix {
    // FFN branch: y = x1 + w2 gelu(w1 ln2(x1) + b1) + b2
    let mut dact = dy.matmul(&p.ffn.w2);
    if let Some(g) = grads.as_mut() {
        g.ffn.w2.add_assign(&dy.matmul_at(&c.ffn_act));
        colsum_into(dy, &mut g.ffn.b2);
    }
    for (g, &u) in dact.data_mut().iter_mut().zip(c.ffn_pre.data()) {
        *g *= gelu_prime(u);
    }
    let dln2_out = dact.matmul(&p.ffn.w1);
    if let Some(g) = grads.as_mut() {
        g.ffn.w1.add_assign(&dact.matmul_at(&c.ln2_out));
        colsum_into(&dact, &mut g.ffn.b1);
    }
    let dln2_in = layer_norm_backward(
        &p.ln2,
        &c.ln2,
        &dln2_out,
        grads.as_mut().map(|g| &mut g.ln2),
    );
    let mut dx1 = dy.clone();
    dx1.add_assign(&dln2_in);

    // Attention branch: x1 = x + attn(ln1(x))
    let dln1_out = attention_backward(&p.attn, c, &dx1, heads, grads.as_mut().map(|g| &mut g.attn));
    let dln1_in = layer_norm_backward(
        &p.ln1,
        &c.ln1,
        &dln1_out,
        grads.as_mut().map(|g| &mut g.ln1),
    );
    let mut dx = dx1;
    dx.add_assign(&dln1_in);
    dx
}
