//! Trainable state and the batch forward/backward shared by training,
//! validation and scoring.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    l2_project, project_rows, project_rows_backward, reduce_tokens, reduce_tokens_backward, tokenwise_backward,
    tokenwise_scores, EmbeddingSet, Projected, ProjectionHead, ReduceCache, TokenReducer,
    TokenwiseScore,
};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};
use crate::loss::{contrastive_loss, BatchSimilarities, Temperature, TAU_MAX, TAU_MIN};
use crate::textenc::{
    text_backward_acc, text_forward, TextCache, TextEncoderConfig, TextEncoderParams,
};
use crate::tokenizer::TokenSequence;

/// Samples per gradient-accumulation chunk. Fixed so that the summation
/// order, and hence the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    Global,
    Tokenwise,
    Reduced,
}

impl SimilarityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Tokenwise => "tokenwise",
            Self::Reduced => "reduced",
        }
    }
}

impl std::fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "tokenwise" => Ok(Self::Tokenwise),
            "reduced" => Ok(Self::Reduced),
            other => Err(Error::Config(format!(
                "unknown similarity mode {other:?} (global, tokenwise, reduced)"
            ))),
        }
    }
}

/// Shapes of everything trainable besides the text tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub text: TextEncoderConfig,
    pub image_dim: usize,
    pub embed_dim: usize,
    pub n_prime: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub shape: ModelShape,
    pub text: TextEncoderParams<T>,
    pub text_proj: ProjectionHead<T>,
    pub image_proj: ProjectionHead<T>,
    pub reducer: TokenReducer<T>,
    /// `1 × 1`, holds `log τ`.
    pub log_tau: Mat<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            text: TextEncoderParams::zeros(shape.text),
            text_proj: ProjectionHead::new(Mat::zeros(shape.text.width, shape.embed_dim)),
            image_proj: ProjectionHead::new(Mat::zeros(shape.image_dim, shape.embed_dim)),
            reducer: TokenReducer::zeros(shape.image_dim, shape.image_dim, shape.n_prime),
            log_tau: Mat::zeros(1, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        if shape.image_dim == 0 || shape.embed_dim == 0 {
            return Err(Error::Config("image_dim and embed_dim must be positive".into()));
        }
        if shape.n_prime == 0 {
            return Err(Error::Config("n_prime must be >= 1".into()));
        }
        let text = TextEncoderParams::init(shape.text, rng)?;
        let text_proj = ProjectionHead::init(shape.text.width, shape.embed_dim, rng);
        let image_proj = ProjectionHead::init(shape.image_dim, shape.embed_dim, rng);
        let reducer = TokenReducer::init(shape.image_dim, shape.n_prime, rng);
        let mut log_tau = Mat::zeros(1, 1);
        log_tau.set(0, 0, Temperature::<T>::default().log_tau);
        Ok(Self {
            shape,
            text,
            text_proj,
            image_proj,
            reducer,
            log_tau,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    pub fn temperature(&self) -> Temperature<T> {
        Temperature {
            log_tau: self.log_tau.at(0, 0),
        }
    }

    /// Keeps `τ` inside the range the loss clamps to.
    pub fn clamp_temperature(&mut self) {
        let lo = T::lit(TAU_MIN.ln());
        let hi = T::lit(TAU_MAX.ln());
        let v = self.log_tau.at(0, 0).max(lo).min(hi);
        self.log_tau.set(0, 0, v);
    }

    pub fn named(&self) -> Vec<(String, &Mat<T>)> {
        let mut out: Vec<(String, &Mat<T>)> = self
            .text
            .named()
            .into_iter()
            .map(|(n, t)| (format!("text.{n}"), t))
            .collect();
        out.push(("text_proj.w".into(), &self.text_proj.weight));
        out.push(("image_proj.w".into(), &self.image_proj.weight));
        out.push(("reducer.conv1.w".into(), &self.reducer.conv1_w));
        out.push(("reducer.conv1.b".into(), &self.reducer.conv1_b));
        out.push(("reducer.conv2.w".into(), &self.reducer.conv2_w));
        out.push(("reducer.conv2.b".into(), &self.reducer.conv2_b));
        out.push(("temperature.log_tau".into(), &self.log_tau));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out: Vec<(String, &mut Mat<T>)> = self
            .text
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("text.{n}"), t))
            .collect();
        out.push(("text_proj.w".into(), &mut self.text_proj.weight));
        out.push(("image_proj.w".into(), &mut self.image_proj.weight));
        out.push(("reducer.conv1.w".into(), &mut self.reducer.conv1_w));
        out.push(("reducer.conv1.b".into(), &mut self.reducer.conv1_b));
        out.push(("reducer.conv2.w".into(), &mut self.reducer.conv2_w));
        out.push(("reducer.conv2.b".into(), &mut self.reducer.conv2_b));
        out.push(("temperature.log_tau".into(), &mut self.log_tau));
        out
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.shape);
        for ((_, d), (_, s)) in out.named_mut().into_iter().zip(self.named()) {
            *d = s.cast();
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Unit-norm global text feature: the `[SEP]` row through the text head.
    pub fn embed_text(&self, seq: &TokenSequence) -> Result<Vec<T>> {
        let (out, _) = text_forward(seq, &self.text)?;
        let row = out.data.select_rows(&[seq.sep_pos]);
        Ok(project_rows(&row, &self.text_proj)?.out.into_vec())
    }

    /// Unit-norm global image feature.
    pub fn embed_image(&self, img: &EmbeddingSet<T>) -> Result<Vec<T>> {
        let g = Mat::from_vec(1, img.dim(), img.image_global()?);
        Ok(project_rows(&g, &self.image_proj)?.out.into_vec())
    }

    /// Every unmasked text token projected into the shared space.
    pub fn project_text_tokens(&self, seq: &TokenSequence) -> Result<EmbeddingSet<T>> {
        let (out, _) = text_forward(seq, &self.text)?;
        l2_project(&out, &self.text_proj)
    }

    /// Every unmasked image token projected into the shared space.
    pub fn project_image_tokens(&self, img: &EmbeddingSet<T>) -> Result<EmbeddingSet<T>> {
        l2_project(img, &self.image_proj)
    }
}

/// Image-side features for one item after projection.
struct ImageSide<T> {
    /// Raw rows fed to the image projection.
    raw: Mat<T>,
    proj: Projected<T>,
    /// Spatial input and cache of the reducer, reduced mode only.
    reduce: Option<(Mat<T>, ReduceCache<T>)>,
}

/// Text-side features for one caption after projection.
struct TextSide<T> {
    cache: TextCache<T>,
    /// Output rows (sequence positions) that were projected.
    rows: Vec<usize>,
    raw: Mat<T>,
    proj: Projected<T>,
}

fn image_side<T: Real>(
    img: &EmbeddingSet<T>,
    params: &ModelParams<T>,
    mode: SimilarityMode,
) -> Result<ImageSide<T>> {
    if img.dim() != params.shape.image_dim {
        return Err(Error::Shape(format!(
            "image embeddings have dim {}, model expects {}",
            img.dim(),
            params.shape.image_dim
        )));
    }
    let (raw, reduce) = match mode {
        SimilarityMode::Global => (Mat::from_vec(1, img.dim(), img.image_global()?), None),
        SimilarityMode::Tokenwise => (img.data.select_rows(&img.unmasked()), None),
        SimilarityMode::Reduced => {
            let (h, w) = img
                .grid
                .ok_or_else(|| Error::Shape("reduced mode needs an image grid".into()))?;
            let spatial = img.data.slice_rows(0, h * w);
            let (out, cache) = reduce_tokens(&spatial, h, w, &params.reducer)?;
            (out, Some((spatial, cache)))
        }
    };
    if raw.rows() == 0 {
        return Err(Error::Shape("image has no unmasked tokens".into()));
    }
    let proj = project_rows(&raw, &params.image_proj)?;
    Ok(ImageSide { raw, proj, reduce })
}

fn text_side<T: Real>(
    seq: &TokenSequence,
    params: &ModelParams<T>,
    mode: SimilarityMode,
) -> Result<TextSide<T>> {
    let (out, cache) = text_forward(seq, &params.text)?;
    let rows: Vec<usize> = match mode {
        SimilarityMode::Global => vec![seq.sep_pos],
        _ => out.content_rows(),
    };
    if rows.is_empty() {
        return Err(Error::NoEligibleTokens);
    }
    let raw = out.data.select_rows(&rows);
    let proj = project_rows(&raw, &params.text_proj)?;
    Ok(TextSide {
        cache,
        rows,
        raw,
        proj,
    })
}

/// Result of a batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchResult<T> {
    pub sims: BatchSimilarities<T>,
    pub loss: T,
    pub grads: Option<ModelParams<T>>,
}

fn pair_scores<T: Real>(
    imgs: &[ImageSide<T>],
    txts: &[TextSide<T>],
) -> Result<Vec<TokenwiseScore<T>>> {
    let b_i = imgs.len();
    let b_t = txts.len();
    (0..b_i * b_t)
        .into_par_iter()
        .map(|p| tokenwise_scores(&imgs[p / b_t].proj.out, &txts[p % b_t].proj.out))
        .collect()
}

/// Similarity matrices between `images` and `texts` (`S_I` is
/// images × texts, `S_T` is texts × images).
pub fn similarity_matrices<T: Real>(
    params: &ModelParams<T>,
    images: &[&EmbeddingSet<T>],
    texts: &[&TokenSequence],
    mode: SimilarityMode,
) -> Result<(Mat<T>, Mat<T>)> {
    let imgs: Vec<ImageSide<T>> = images
        .par_iter()
        .map(|img| image_side(img, params, mode))
        .collect::<Result<_>>()?;
    let txts: Vec<TextSide<T>> = texts
        .par_iter()
        .map(|s| text_side(s, params, mode))
        .collect::<Result<_>>()?;
    Ok(similarities_from_sides(&imgs, &txts, mode)?.0)
}

type SideSims<T> = ((Mat<T>, Mat<T>), Option<Vec<TokenwiseScore<T>>>);

fn similarities_from_sides<T: Real>(
    imgs: &[ImageSide<T>],
    txts: &[TextSide<T>],
    mode: SimilarityMode,
) -> Result<SideSims<T>> {
    let (b_i, b_t) = (imgs.len(), txts.len());
    match mode {
        SimilarityMode::Global => {
            let mut i = Mat::zeros(b_i, imgs.first().map_or(0, |s| s.proj.out.cols()));
            for (k, s) in imgs.iter().enumerate() {
                i.row_mut(k).copy_from_slice(s.proj.out.row(0));
            }
            let mut t = Mat::zeros(b_t, i.cols());
            for (k, s) in txts.iter().enumerate() {
                t.row_mut(k).copy_from_slice(s.proj.out.row(0));
            }
            let s_i = i.matmul_t(&t);
            let s_t = s_i.transpose();
            Ok(((s_i, s_t), None))
        }
        _ => {
            let scores = pair_scores(imgs, txts)?;
            let mut s_i = Mat::zeros(b_i, b_t);
            let mut s_t = Mat::zeros(b_t, b_i);
            for (p, sc) in scores.iter().enumerate() {
                let (k, j) = (p / b_t, p % b_t);
                s_i.set(k, j, sc.s_i);
                s_t.set(j, k, sc.s_t);
            }
            Ok(((s_i, s_t), Some(scores)))
        }
    }
}

/// Contrastive loss of a batch of aligned pairs (`images[k]` goes with
/// `texts[k]`), with gradients for every trainable tensor when `with_grad`.
/// Image embeddings themselves never receive updates.
pub fn batch_loss<T: Real>(
    params: &ModelParams<T>,
    images: &[&EmbeddingSet<T>],
    texts: &[&TokenSequence],
    mode: SimilarityMode,
    with_grad: bool,
) -> Result<BatchResult<T>> {
    if images.len() != texts.len() || images.is_empty() {
        return Err(Error::Shape(format!(
            "batch needs equal, non-zero image and text counts ({} vs {})",
            images.len(),
            texts.len()
        )));
    }
    let imgs: Vec<ImageSide<T>> = images
        .par_iter()
        .map(|img| image_side(img, params, mode))
        .collect::<Result<_>>()?;
    let txts: Vec<TextSide<T>> = texts
        .par_iter()
        .map(|s| text_side(s, params, mode))
        .collect::<Result<_>>()?;
    let ((s_i, s_t), scores) = similarities_from_sides(&imgs, &txts, mode)?;
    let sims = BatchSimilarities::new(s_i, s_t)?;
    let out = contrastive_loss(&sims, &params.temperature())?;
    if !with_grad {
        return Ok(BatchResult {
            sims,
            loss: out.loss,
            grads: None,
        });
    }

    let b = imgs.len();
    let mut grads = params.zeros_like();
    grads.log_tau.set(0, 0, out.grad_log_tau);

    // gradients w.r.t. the projected rows of each side
    let mut d_img: Vec<Mat<T>> = imgs
        .iter()
        .map(|s| Mat::zeros(s.proj.out.rows(), s.proj.out.cols()))
        .collect();
    let mut d_txt: Vec<Mat<T>> = txts
        .iter()
        .map(|s| Mat::zeros(s.proj.out.rows(), s.proj.out.cols()))
        .collect();
    match &scores {
        None => {
            for k in 0..b {
                for j in 0..b {
                    // S_I[k][j] = i_k·t_j and S_T[j][k] = S_I[k][j]
                    let g = out.grad_s_i.at(k, j) + out.grad_s_t.at(j, k);
                    if g == T::zero() {
                        continue;
                    }
                    crate::linalg::axpy(g, txts[j].proj.out.row(0), d_img[k].row_mut(0));
                    crate::linalg::axpy(g, imgs[k].proj.out.row(0), d_txt[j].row_mut(0));
                }
            }
        }
        Some(scores) => {
            for (p, sc) in scores.iter().enumerate() {
                let (k, j) = (p / b, p % b);
                let (di, dt) = (&mut d_img[k], &mut d_txt[j]);
                tokenwise_backward(
                    &imgs[k].proj.out,
                    &txts[j].proj.out,
                    sc,
                    out.grad_s_i.at(k, j),
                    out.grad_s_t.at(j, k),
                    di,
                    dt,
                );
            }
        }
    }

    // image side: projection, then the reducer; the embeddings are frozen
    for (s, d) in imgs.iter().zip(&d_img) {
        let (d_raw, d_w) = project_rows_backward(&s.raw, &params.image_proj, &s.proj, d);
        grads.image_proj.weight.add_assign(&d_w);
        if let Some((spatial, cache)) = &s.reduce {
            let (gr, _) = reduce_tokens_backward(spatial, &params.reducer, cache, &d_raw);
            grads.reducer.conv1_w.add_assign(&gr.conv1_w);
            grads.reducer.conv1_b.add_assign(&gr.conv1_b);
            grads.reducer.conv2_w.add_assign(&gr.conv2_w);
            grads.reducer.conv2_b.add_assign(&gr.conv2_b);
        }
    }

    // text side: projection, then the encoder in fixed-size chunks
    let width = params.shape.text.width;
    let mut d_outs = Vec::with_capacity(b);
    for (s, d) in txts.iter().zip(&d_txt) {
        let (d_raw, d_w) = project_rows_backward(&s.raw, &params.text_proj, &s.proj, d);
        grads.text_proj.weight.add_assign(&d_w);
        let mut d_out = Mat::zeros(s.cache_len(), width);
        for (i, &r) in s.rows.iter().enumerate() {
            d_out.row_mut(r).copy_from_slice(d_raw.row(i));
        }
        d_outs.push(d_out);
    }
    let chunks: Vec<TextEncoderParams<T>> = (0..b.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = params.text.zeros_like();
            for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(b) {
                text_backward_acc(&params.text, &txts[i].cache, &d_outs[i], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    for g in &chunks {
        grads.text.add_assign(g);
    }

    Ok(BatchResult {
        sims,
        loss: out.loss,
        grads: Some(grads),
    })
}

impl<T> TextSide<T> {
    fn cache_len(&self) -> usize {
        self.cache.max_len()
    }
}
