//! Small synthetic pairing task: random unit image embeddings, each named by
//! a two-character caption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::CaptionRecord;
use crate::align::{EmbeddingFile, EmbeddingKind, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tokenizer::{Vocab, CLS, PAD, SEP, UNK};

const FIRST: [char; 8] = ['红', '蓝', '绿', '黄', '黑', '白', '紫', '灰'];
const SECOND: [char; 8] = ['猫', '狗', '鸟', '鱼', '马', '牛', '羊', '鸡'];

pub const MAX_SYNTH_PAIRS: usize = FIRST.len() * SECOND.len();

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub vocab: Vocab,
    pub captions: Vec<CaptionRecord>,
    pub embeddings: EmbeddingFile,
}

/// Caption naming item `i`.
pub fn synth_caption(i: usize) -> String {
    format!("{}{}", FIRST[i % FIRST.len()], SECOND[i / FIRST.len() % SECOND.len()])
}

pub fn synth_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend(FIRST.iter().chain(&SECOND).map(|c| c.to_string()));
    Vocab::from_tokens(tokens).expect("synthetic vocabulary is valid")
}

/// `n_pairs` items of unit-norm random tokens: one token per item without a
/// grid, `h·w` tokens with one.
pub fn synth_task(
    n_pairs: usize,
    image_dim: usize,
    grid: Option<(usize, usize)>,
    seed: u64,
) -> Result<SynthTask> {
    if n_pairs == 0 || n_pairs > MAX_SYNTH_PAIRS {
        return Err(Error::Config(format!(
            "synthetic task supports 1..={MAX_SYNTH_PAIRS} pairs"
        )));
    }
    if image_dim == 0 {
        return Err(Error::Config("image_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tokens = grid.map_or(1, |(h, w)| h * w);
    let sets: Vec<EmbeddingSet<f32>> = (0..n_pairs)
        .map(|_| {
            let mut m = Mat::<f32>::randn(n_tokens, image_dim, 1.0, &mut rng);
            for r in 0..n_tokens {
                let row = m.row_mut(r);
                let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                row.iter_mut().for_each(|x| *x /= norm);
            }
            let mask = vec![1; n_tokens];
            EmbeddingSet::new(m, grid, mask, EmbeddingKind::Image)
        })
        .collect::<Result<_>>()?;
    let captions = (0..n_pairs)
        .map(|i| CaptionRecord {
            id: i.to_string(),
            caption: synth_caption(i),
            image: None,
        })
        .collect();
    Ok(SynthTask {
        vocab: synth_vocab(),
        captions,
        embeddings: EmbeddingFile::from_sets(&sets)?,
    })
}
