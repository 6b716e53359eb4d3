use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{EmbeddingFile, EmbeddingKind, EmbeddingSet};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Tokenizer};

/// One caption line: `{"id": ..., "caption": ..., "image": optional index}`.
/// Without `image`, the id itself must be the embedding item index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<usize>,
}

impl CaptionRecord {
    pub fn from_json_line(line: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let id = match v.get("id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(Error::Data("caption record needs an id".into())),
        };
        let caption = v
            .get("caption")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::Data(format!("caption record {id} has no caption")))?
            .to_string();
        let image = match v.get("image") {
            None | Some(serde_json::Value::Null) => None,
            Some(x) => Some(
                x.as_u64()
                    .ok_or_else(|| Error::Data(format!("caption {id}: bad image index")))?
                    as usize,
            ),
        };
        Ok(Self { id, caption, image })
    }

    pub fn image_index(&self) -> Result<usize> {
        match self.image {
            Some(i) => Ok(i),
            None => self.id.parse().map_err(|_| {
                Error::Data(format!(
                    "caption id {:?} is not an embedding index and no image field is given",
                    self.id
                ))
            }),
        }
    }
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            CaptionRecord::from_json_line(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Aligned (image, caption) pairs ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub ids: Vec<String>,
    pub images: Vec<EmbeddingSet<f32>>,
    pub seqs: Vec<TokenSequence>,
}

impl PairDataset {
    /// Pairs every caption with its embedding item. Each item must be used
    /// by exactly one caption.
    pub fn build(
        emb: &EmbeddingFile,
        captions: &[CaptionRecord],
        tokenizer: &Tokenizer,
        max_len: usize,
    ) -> Result<Self> {
        if captions.is_empty() || emb.n_items == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if captions.len() != emb.n_items {
            return Err(Error::Data(format!(
                "{} captions for {} embedding items",
                captions.len(),
                emb.n_items
            )));
        }
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(captions.len());
        let mut images = Vec::with_capacity(captions.len());
        let mut seqs = Vec::with_capacity(captions.len());
        for c in captions {
            let i = c.image_index()?;
            if i >= emb.n_items {
                return Err(Error::Data(format!(
                    "caption {} refers to item {i} of {}",
                    c.id, emb.n_items
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Data(format!("embedding item {i} used twice")));
            }
            ids.push(c.id.clone());
            images.push(emb.item(i, EmbeddingKind::Image));
            seqs.push(tokenizer.encode(&c.caption, max_len)?);
        }
        Ok(Self { ids, images, seqs })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}
