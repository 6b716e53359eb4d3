//! Loading and scoring the image and text sides of a comparison.

use rayon::prelude::*;

use super::PairInputArgs;
use crate::align::{
    reduced_tokenwise_similarity, tokenwise_similarity, EmbeddingFile, EmbeddingKind,
    EmbeddingSet,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::textenc::Checkpoint;
use crate::tokenizer::{TokenSequence, Tokenizer, Vocab};
use crate::train::{load_model, read_captions, similarity_matrices, ModelParams, SimilarityMode};

pub struct ImageInputs {
    pub sets: Vec<EmbeddingSet<f32>>,
    pub ids: Vec<String>,
}

pub enum TextSource {
    /// Token features already in the shared space.
    Features(Vec<EmbeddingSet<f32>>),
    /// Captions to run through the text tower.
    Encoded(Vec<TokenSequence>),
}

pub struct TextInputs {
    pub ids: Vec<String>,
    pub source: TextSource,
    /// Image item of every text, when known.
    pub image_of: Option<Vec<usize>>,
}

impl TextInputs {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct PairInputs {
    pub images: ImageInputs,
    pub texts: TextInputs,
    pub model: Option<ModelParams<f32>>,
    pub vocab: Option<Vocab>,
}

fn index_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

pub fn load_images(path: &std::path::Path) -> Result<ImageInputs> {
    let file = EmbeddingFile::load(path)?;
    let sets = file.items(EmbeddingKind::Image);
    Ok(ImageInputs {
        ids: index_ids(sets.len()),
        sets,
    })
}

pub fn load_pair_inputs(args: &PairInputArgs) -> Result<PairInputs> {
    let images = load_images(&args.images)?;
    let model = match &args.checkpoint {
        Some(p) => Some(load_model(&Checkpoint::load(p)?)?),
        None => None,
    };
    let vocab = args.vocab.as_ref().map(Vocab::load).transpose()?;
    let texts = match (&args.texts, &args.captions) {
        (Some(p), None) => {
            let sets = EmbeddingFile::load(p)?.items(EmbeddingKind::Text);
            TextInputs {
                ids: index_ids(sets.len()),
                source: TextSource::Features(sets),
                image_of: None,
            }
        }
        (None, Some(p)) => {
            let (Some(model), Some(vocab)) = (&model, &vocab) else {
                return Err(Error::Config("--captions needs --checkpoint and --vocab".into()));
            };
            if vocab.len() != model.shape.text.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary has {} tokens, model expects {}",
                    vocab.len(),
                    model.shape.text.vocab_size
                )));
            }
            let tok = Tokenizer::new(vocab.clone()).with_granularity(args.granularity.into());
            let records = read_captions(p)?;
            let seqs = records
                .iter()
                .map(|r| tok.encode(&r.caption, model.shape.text.max_len))
                .collect::<Result<Vec<_>>>()?;
            let image_of = records
                .iter()
                .map(|r| r.image_index())
                .collect::<Result<Vec<_>>>()
                .ok();
            TextInputs {
                ids: records.into_iter().map(|r| r.id).collect(),
                source: TextSource::Encoded(seqs),
                image_of,
            }
        }
        _ => return Err(Error::Config("give exactly one of --texts and --captions".into())),
    };
    if images.sets.is_empty() || texts.is_empty() {
        return Err(Error::Data("no images or no texts".into()));
    }
    Ok(PairInputs {
        images,
        texts,
        model,
        vocab,
    })
}

fn unit(mut v: Vec<f32>, row: usize) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroNorm { row });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn stack(rows: Vec<Vec<f32>>) -> Result<Mat<f32>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature widths differ between items".into()));
    }
    Ok(Mat::from_vec(rows.len(), d, rows.concat()))
}

fn text_sep_row(set: &EmbeddingSet<f32>) -> Result<Vec<f32>> {
    let last = *set
        .unmasked()
        .last()
        .ok_or_else(|| Error::Data("text item has no unmasked tokens".into()))?;
    Ok(set.data.row(last).to_vec())
}

/// Image item as seen by the comparison: projected by the model when one
/// is given, unchanged otherwise.
pub fn image_tokens(
    img: &EmbeddingSet<f32>,
    model: Option<&ModelParams<f32>>,
) -> Result<EmbeddingSet<f32>> {
    match model {
        Some(m) => m.project_image_tokens(img),
        None => Ok(img.clone()),
    }
}

/// `S_I` (images × texts) and `S_T` (texts × images).
pub fn score_matrices(
    images: &[EmbeddingSet<f32>],
    texts: &TextInputs,
    model: Option<&ModelParams<f32>>,
    mode: SimilarityMode,
) -> Result<(Mat<f32>, Mat<f32>)> {
    let feats = match &texts.source {
        TextSource::Encoded(seqs) => {
            let model =
                model.ok_or_else(|| Error::Config("encoding captions needs a checkpoint".into()))?;
            let imgs: Vec<&EmbeddingSet<f32>> = images.iter().collect();
            let txts: Vec<&TokenSequence> = seqs.iter().collect();
            return similarity_matrices(model, &imgs, &txts, mode);
        }
        TextSource::Features(f) => f,
    };
    match mode {
        SimilarityMode::Global => {
            let i = images
                .iter()
                .enumerate()
                .map(|(k, img)| match model {
                    Some(m) => m.embed_image(img),
                    None => unit(img.image_global()?, k),
                })
                .collect::<Result<Vec<_>>>()?;
            let t = feats
                .iter()
                .enumerate()
                .map(|(k, s)| unit(text_sep_row(s)?, k))
                .collect::<Result<Vec<_>>>()?;
            let (i, t) = (stack(i)?, stack(t)?);
            if i.cols() != t.cols() {
                return Err(Error::Shape(format!(
                    "image features have dim {}, text features {}",
                    i.cols(),
                    t.cols()
                )));
            }
            let s = i.matmul_t(&t);
            let st = s.transpose();
            Ok((s, st))
        }
        SimilarityMode::Tokenwise | SimilarityMode::Reduced => {
            let (b_i, b_t) = (images.len(), feats.len());
            let pairs: Vec<(f32, f32)> = match mode {
                SimilarityMode::Tokenwise => {
                    let imgs = images
                        .iter()
                        .map(|img| image_tokens(img, model))
                        .collect::<Result<Vec<_>>>()?;
                    (0..b_i * b_t)
                        .into_par_iter()
                        .map(|p| tokenwise_similarity(&imgs[p / b_t], &feats[p % b_t]))
                        .collect::<Result<_>>()?
                }
                _ => {
                    let m = model
                        .ok_or_else(|| Error::Config("reduced mode needs --checkpoint".into()))?;
                    (0..b_i * b_t)
                        .into_par_iter()
                        .map(|p| {
                            reduced_tokenwise_similarity(
                                &images[p / b_t],
                                &feats[p % b_t],
                                &m.reducer,
                                &m.image_proj,
                            )
                        })
                        .collect::<Result<_>>()?
                }
            };
            let mut s_i = Mat::zeros(b_i, b_t);
            let mut s_t = Mat::zeros(b_t, b_i);
            for (p, (a, b)) in pairs.into_iter().enumerate() {
                s_i.set(p / b_t, p % b_t, a);
                s_t.set(p % b_t, p / b_t, b);
            }
            Ok((s_i, s_t))
        }
    }
}
