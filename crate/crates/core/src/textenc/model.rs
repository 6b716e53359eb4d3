//! Pre-norm causal transformer over token ids.
//!
//! ```text
//! x = tok_emb[ids] + pos_emb
//! x = x + Attn(LN1(x))       (causal, padded keys masked)
//! x = x + MLP(LN2(x))        (GELU, 4× hidden)
//! y = LN_f(x)
//! ```
//!
//! Padding sits after `[SEP]`, so with a causal mask no real position ever
//! attends to it. The forward pass therefore runs on the real prefix only;
//! padded output rows are zero.

use super::params::{LayerParams, TextEncoderParams};
use crate::align::{EmbeddingKind, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, gelu, gelu_grad, Mat, Real};
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Real>(x: &Mat<T>, g: &Mat<T>, b: &Mat<T>) -> (Mat<T>, LnCache<T>) {
    let (n, w) = (x.rows(), x.cols());
    let wn = T::from_usize(w).unwrap();
    let eps = T::lit(LN_EPS);
    let mut xhat = Mat::zeros(n, w);
    let mut y = Mat::zeros(n, w);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) / wn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / wn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for c in 0..w {
            xh[c] = (row[c] - mu) * is;
        }
        let yr = y.row_mut(r);
        for c in 0..w {
            yr[c] = g.as_slice()[c] * xhat.at(r, c) + b.as_slice()[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dg`, `db`.
fn layer_norm_backward<T: Real>(
    dy: &Mat<T>,
    g: &Mat<T>,
    cache: &LnCache<T>,
    dg: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Mat<T> {
    let (n, w) = (dy.rows(), dy.cols());
    let wn = T::from_usize(w).unwrap();
    let mut dx = Mat::zeros(n, w);
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        let mut dxhat = vec![T::zero(); w];
        for c in 0..w {
            dxhat[c] = dyr[c] * g.as_slice()[c];
            mean_d = mean_d + dxhat[c];
            mean_dx = mean_dx + dxhat[c] * xh[c];
        }
        mean_d = mean_d / wn;
        mean_dx = mean_dx / wn;
        let out = dx.row_mut(r);
        for c in 0..w {
            out[c] = cache.inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
        let dgs = dg.as_mut_slice();
        for c in 0..w {
            dgs[c] = dgs[c] + dyr[c] * xh[c];
        }
        let dbs = db.as_mut_slice();
        for c in 0..w {
            dbs[c] = dbs[c] + dyr[c];
        }
    }
    dx
}

fn linear<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b.as_slice());
    y
}

/// Returns `dx`; accumulates into `dw`, `db`.
fn linear_backward<T: Real>(
    x: &Mat<T>,
    w: &Mat<T>,
    dy: &Mat<T>,
    dw: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Mat<T> {
    x.t_matmul_acc(dy, dw);
    dy.col_sums_acc(db.as_mut_slice());
    dy.matmul_t(w)
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    h1: Mat<T>,
    qkv: Mat<T>,
    /// One `n × n` row-stochastic matrix per head (lower triangular).
    probs: Vec<Mat<T>>,
    attn: Mat<T>,
    ln2: LnCache<T>,
    h2: Mat<T>,
    pre_fc: Mat<T>,
    act_fc: Mat<T>,
}

/// Forward intermediates of one sequence.
#[derive(Debug, Clone)]
pub struct TextCache<T> {
    ids: Vec<u32>,
    n: usize,
    max_len: usize,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
}

impl<T> TextCache<T> {
    pub fn real_len(&self) -> usize {
        self.n
    }

    /// Row count of the forward output.
    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

fn attention_forward<T: Real>(
    qkv: &Mat<T>,
    n_heads: usize,
    width: usize,
) -> (Mat<T>, Vec<Mat<T>>) {
    let n = qkv.rows();
    let dh = width / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = Mat::zeros(n, width);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
        let mut p = Mat::zeros(n, n);
        for i in 0..n {
            let q = &qkv.row(i)[qo..qo + dh];
            let pr = p.row_mut(i);
            let mut m = T::neg_infinity();
            for j in 0..=i {
                let s = dot(q, &qkv.row(j)[ko..ko + dh]) * scale;
                pr[j] = s;
                m = m.max(s);
            }
            let mut z = T::zero();
            for v in pr.iter_mut().take(i + 1) {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in pr.iter_mut().take(i + 1) {
                *v = *v / z;
            }
            let o = &mut out.row_mut(i)[qo..qo + dh];
            for j in 0..=i {
                axpy(p.at(i, j), &qkv.row(j)[vo..vo + dh], o);
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    qkv: &Mat<T>,
    probs: &[Mat<T>],
    d_out: &Mat<T>,
    width: usize,
) -> Mat<T> {
    let n = qkv.rows();
    let n_heads = probs.len();
    let dh = width / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dqkv = Mat::zeros(n, 3 * width);
    let mut dp = vec![T::zero(); n];
    for (h, p) in probs.iter().enumerate() {
        let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
        for i in 0..n {
            let dor = &d_out.row(i)[qo..qo + dh];
            let pr = p.row(i);
            let mut pdp = T::zero();
            for j in 0..=i {
                dp[j] = dot(dor, &qkv.row(j)[vo..vo + dh]);
                pdp = pdp + pr[j] * dp[j];
                // dv_j += p_ij · do_i
                axpy(pr[j], dor, &mut dqkv.row_mut(j)[vo..vo + dh]);
            }
            for j in 0..=i {
                let ds = pr[j] * (dp[j] - pdp) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(ds, &qkv.row(j)[ko..ko + dh], &mut dqkv.row_mut(i)[qo..qo + dh]);
                axpy(ds, &qkv.row(i)[qo..qo + dh], &mut dqkv.row_mut(j)[ko..ko + dh]);
            }
        }
    }
    dqkv
}

fn check_sequence(seq: &TokenSequence, params_vocab: usize, max_len: usize) -> Result<usize> {
    if seq.ids.len() > max_len {
        return Err(Error::Shape(format!(
            "sequence length {} exceeds max_len {max_len}",
            seq.ids.len()
        )));
    }
    if seq.mask.len() != seq.ids.len() || seq.sep_pos >= seq.ids.len() {
        return Err(Error::Shape("malformed token sequence".into()));
    }
    let n = seq.real_len();
    if seq.mask[..n].iter().any(|&m| m == 0) || seq.mask[n..].iter().any(|&m| m != 0) {
        return Err(Error::Shape("mask must cover exactly [CLS]..[SEP]".into()));
    }
    for &id in &seq.ids {
        if id as usize >= params_vocab {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: params_vocab,
            });
        }
    }
    Ok(n)
}

fn layer_forward<T: Real>(
    x: &mut Mat<T>,
    l: &LayerParams<T>,
    n_heads: usize,
) -> LayerCache<T> {
    let width = x.cols();
    let (h1, ln1) = layer_norm(x, &l.ln1_g, &l.ln1_b);
    let qkv = linear(&h1, &l.w_qkv, &l.b_qkv);
    let (attn, probs) = attention_forward(&qkv, n_heads, width);
    x.add_assign(&linear(&attn, &l.w_o, &l.b_o));
    let (h2, ln2) = layer_norm(x, &l.ln2_g, &l.ln2_b);
    let pre_fc = linear(&h2, &l.w_fc, &l.b_fc);
    let mut act_fc = pre_fc.clone();
    act_fc.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    x.add_assign(&linear(&act_fc, &l.w_proj, &l.b_proj));
    LayerCache {
        ln1,
        h1,
        qkv,
        probs,
        attn,
        ln2,
        h2,
        pre_fc,
        act_fc,
    }
}

/// Per-token features of one caption plus the cache needed for backward.
/// The result has `ids.len()` rows; rows after `[SEP]` are zero and masked.
pub fn text_forward<T: Real>(
    seq: &TokenSequence,
    params: &TextEncoderParams<T>,
) -> Result<(EmbeddingSet<T>, TextCache<T>)> {
    let cfg = params.config;
    let n = check_sequence(seq, params.tok_emb.rows(), params.pos_emb.rows())?;
    let width = cfg.width;
    let mut x = Mat::zeros(n, width);
    for i in 0..n {
        let row = x.row_mut(i);
        row.copy_from_slice(params.tok_emb.row(seq.ids[i] as usize));
        axpy(T::one(), params.pos_emb.row(i), row);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in &params.layers {
        layers.push(layer_forward(&mut x, l, cfg.n_heads));
    }
    let (y, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let mut data = Mat::zeros(seq.ids.len(), width);
    for i in 0..n {
        data.row_mut(i).copy_from_slice(y.row(i));
    }
    let set = EmbeddingSet::new(data, None, seq.mask.clone(), EmbeddingKind::Text)?;
    Ok((
        set,
        TextCache {
            ids: seq.ids[..n].to_vec(),
            n,
            max_len: seq.ids.len(),
            layers,
            lnf,
        },
    ))
}

/// Accumulates parameter gradients for upstream gradient `d_out` (one row per
/// output row; padded rows are ignored) into `grads`.
pub fn text_backward_acc<T: Real>(
    params: &TextEncoderParams<T>,
    cache: &TextCache<T>,
    d_out: &Mat<T>,
    grads: &mut TextEncoderParams<T>,
) -> Result<()> {
    let cfg = params.config;
    if d_out.rows() != cache.max_len || d_out.cols() != cfg.width {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{} for {}x{} output",
            d_out.rows(),
            d_out.cols(),
            cache.max_len,
            cfg.width
        )));
    }
    if cache.layers.len() != params.layers.len() {
        return Err(Error::Shape("cache does not match parameters".into()));
    }
    let n = cache.n;
    let dy = d_out.slice_rows(0, n);
    let mut dx = layer_norm_backward(
        &dy,
        &params.lnf_g,
        &cache.lnf,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );
    for ((l, lc), gl) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // MLP branch
        let d_act = linear_backward(&lc.act_fc, &l.w_proj, &dx, &mut gl.w_proj, &mut gl.b_proj);
        let mut d_pre = d_act;
        for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(lc.pre_fc.as_slice()) {
            *g = *g * gelu_grad(p);
        }
        let d_h2 = linear_backward(&lc.h2, &l.w_fc, &d_pre, &mut gl.w_fc, &mut gl.b_fc);
        dx.add_assign(&layer_norm_backward(
            &d_h2,
            &l.ln2_g,
            &lc.ln2,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
        ));
        // attention branch
        let d_attn = linear_backward(&lc.attn, &l.w_o, &dx, &mut gl.w_o, &mut gl.b_o);
        let d_qkv = attention_backward(&lc.qkv, &lc.probs, &d_attn, cfg.width);
        let d_h1 = linear_backward(&lc.h1, &l.w_qkv, &d_qkv, &mut gl.w_qkv, &mut gl.b_qkv);
        dx.add_assign(&layer_norm_backward(
            &d_h1,
            &l.ln1_g,
            &lc.ln1,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
        ));
    }
    for i in 0..n {
        let g = dx.row(i);
        axpy(T::one(), g, grads.tok_emb.row_mut(cache.ids[i] as usize));
        axpy(T::one(), g, grads.pos_emb.row_mut(i));
    }
    Ok(())
}

/// Parameter gradients for upstream gradient `d_out`.
pub fn text_backward<T: Real>(
    params: &TextEncoderParams<T>,
    cache: &TextCache<T>,
    d_out: &Mat<T>,
) -> Result<TextEncoderParams<T>> {
    let mut grads = params.zeros_like();
    text_backward_acc(params, cache, d_out, &mut grads)?;
    Ok(grads)
}

/// Global text feature: the `[SEP]` row.
pub fn text_global<T: Real>(set: &EmbeddingSet<T>, seq: &TokenSequence) -> Vec<T> {
    set.data.row(seq.sep_pos).to_vec()
}
