//! Cross-modal similarity kernels.
//!
//! Global similarity is a plain dot product between sequence-level features.
//! Token-wise (late-interaction) similarity averages, over one side's
//! tokens, each token's best dot product against the other side:
//!
//! ```text
//! s_I = (1/n1) Σ_k max_r ⟨img_k, txt_r⟩      s_T = (1/n2) Σ_r max_k ⟨txt_r, img_k⟩
//! ```
//!
//! Text `[CLS]`, `[SEP]` and padding never take part on the text side.

use super::embedding::EmbeddingSet;
use super::project::{l2_project, ProjectionHead};
use super::reduce::{token_reduce, TokenReducer};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Mat, Real};

/// `S[i][j] = img_i · txt_j`
pub fn global_similarity<T: Real>(img: &Mat<T>, txt: &Mat<T>) -> Result<Mat<T>> {
    if img.cols() != txt.cols() {
        return Err(Error::Shape(format!(
            "global similarity dims {} vs {}",
            img.cols(),
            txt.cols()
        )));
    }
    Ok(img.matmul_t(txt))
}

/// Backward of [`global_similarity`]: returns `(d_img, d_txt)`.
pub fn global_similarity_backward<T: Real>(
    img: &Mat<T>,
    txt: &Mat<T>,
    d_s: &Mat<T>,
) -> (Mat<T>, Mat<T>) {
    (d_s.matmul(txt), d_s.t_matmul(img))
}

/// Token-wise scores between one image token matrix and one text token
/// matrix, with the argmax choices needed for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenwiseScore<T> {
    pub s_i: T,
    pub s_t: T,
    /// For each image token, index of its best text token.
    pub img_best: Vec<usize>,
    /// For each text token, index of its best image token.
    pub txt_best: Vec<usize>,
}

/// `img` is `n1 × d`, `txt` is `n2 × d`; every row participates. Ties in the
/// max go to the lowest index.
pub fn tokenwise_scores<T: Real>(img: &Mat<T>, txt: &Mat<T>) -> Result<TokenwiseScore<T>> {
    if img.cols() != txt.cols() {
        return Err(Error::Shape(format!(
            "token-wise dims {} vs {}",
            img.cols(),
            txt.cols()
        )));
    }
    if txt.rows() == 0 {
        return Err(Error::NoEligibleTokens);
    }
    if img.rows() == 0 {
        return Err(Error::Shape("image has no tokens".into()));
    }
    let sims = img.matmul_t(txt);
    let (n1, n2) = (img.rows(), txt.rows());
    let mut img_best = vec![0; n1];
    let mut txt_best = vec![0; n2];
    let mut col_max = vec![T::neg_infinity(); n2];
    let mut s_i = T::zero();
    for k in 0..n1 {
        let row = sims.row(k);
        let mut best = 0;
        for r in 0..n2 {
            let v = row[r];
            if v > row[best] {
                best = r;
            }
            if v > col_max[r] {
                col_max[r] = v;
                txt_best[r] = k;
            }
        }
        img_best[k] = best;
        s_i = s_i + row[best];
    }
    let s_t = col_max.iter().fold(T::zero(), |a, &v| a + v);
    Ok(TokenwiseScore {
        s_i: s_i / T::from_usize(n1).unwrap(),
        s_t: s_t / T::from_usize(n2).unwrap(),
        img_best,
        txt_best,
    })
}

/// Backward of [`tokenwise_scores`] given upstream `ds_i`, `ds_t`.
/// Gradients are accumulated into `d_img` and `d_txt`.
pub fn tokenwise_backward<T: Real>(
    img: &Mat<T>,
    txt: &Mat<T>,
    score: &TokenwiseScore<T>,
    ds_i: T,
    ds_t: T,
    d_img: &mut Mat<T>,
    d_txt: &mut Mat<T>,
) {
    let a = ds_i / T::from_usize(img.rows()).unwrap();
    for (k, &r) in score.img_best.iter().enumerate() {
        axpy(a, txt.row(r), d_img.row_mut(k));
        axpy(a, img.row(k), d_txt.row_mut(r));
    }
    let b = ds_t / T::from_usize(txt.rows()).unwrap();
    for (r, &k) in score.txt_best.iter().enumerate() {
        axpy(b, img.row(k), d_txt.row_mut(r));
        axpy(b, txt.row(r), d_img.row_mut(k));
    }
}

/// Token-wise similarity of projected, normalized sets. The image side uses
/// all unmasked rows; the text side uses its content rows only.
pub fn tokenwise_similarity<T: Real>(
    img: &EmbeddingSet<T>,
    txt: &EmbeddingSet<T>,
) -> Result<(T, T)> {
    let i = img.data.select_rows(&img.unmasked());
    let t = txt.data.select_rows(&txt.content_rows());
    let s = tokenwise_scores(&i, &t)?;
    Ok((s.s_i, s.s_t))
}

/// Reduces the image grid to `n′` tokens, projects them with `head`, then
/// scores token-wise against the (already projected) text.
pub fn reduced_tokenwise_similarity<T: Real>(
    img: &EmbeddingSet<T>,
    txt: &EmbeddingSet<T>,
    reducer: &TokenReducer<T>,
    head: &ProjectionHead<T>,
) -> Result<(T, T)> {
    let reduced = token_reduce(img, reducer)?;
    let projected = l2_project(&reduced, head)?;
    tokenwise_similarity(&projected, txt)
}

/// Approximate multiply-accumulate count of one token-wise comparison.
pub fn tokenwise_flops(n_img: usize, n_txt: usize, d: usize) -> usize {
    n_img * n_txt * d
}
