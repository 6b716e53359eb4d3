use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

pub const KS: [usize; 3] = [1, 5, 10];

/// Positives per query in both directions, as candidate indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetrievalGroundTruth {
    pub image_to_texts: BTreeMap<usize, BTreeSet<usize>>,
    pub text_to_images: BTreeMap<usize, BTreeSet<usize>>,
}

impl RetrievalGroundTruth {
    /// Builds both maps from `(image, text)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut gt = Self::default();
        for (i, t) in pairs {
            gt.image_to_texts.entry(i).or_default().insert(t);
            gt.text_to_images.entry(t).or_default().insert(i);
        }
        gt
    }

    /// `image k ↔ text k` for `k < n`.
    pub fn diagonal(n: usize) -> Self {
        Self::from_pairs((0..n).map(|k| (k, k)))
    }

    pub fn pairs(&self) -> BTreeSet<(usize, usize)> {
        self.image_to_texts
            .iter()
            .flat_map(|(&i, ts)| ts.iter().map(move |&t| (i, t)))
            .collect()
    }

    /// Whether the two maps describe the same relation.
    pub fn is_consistent(&self) -> bool {
        let back: BTreeSet<(usize, usize)> = self
            .text_to_images
            .iter()
            .flat_map(|(&t, is)| is.iter().map(move |&i| (i, t)))
            .collect();
        back == self.pairs()
    }
}

/// One line of a ground-truth file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLine {
    pub query_id: String,
    pub positives: Vec<String>,
}

/// Parses `{query_id, positives}` lines into `query index → candidate
/// indices`, resolving ids through the given id lists.
pub fn parse_ground_truth(
    text: &str,
    query_ids: &[String],
    candidate_ids: &[String],
) -> Result<BTreeMap<usize, BTreeSet<usize>>> {
    let q_index: HashMap<&str, usize> = query_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let c_index: HashMap<&str, usize> = candidate_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: GroundTruthLine = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("ground truth line {}: {e}", n + 1)))?;
        let q = *q_index
            .get(g.query_id.as_str())
            .ok_or_else(|| Error::Data(format!("unknown query id {:?}", g.query_id)))?;
        let entry = out.entry(q).or_default();
        for p in &g.positives {
            let c = *c_index
                .get(p.as_str())
                .ok_or_else(|| Error::Data(format!("unknown candidate id {p:?}")))?;
            entry.insert(c);
        }
    }
    Ok(out)
}

pub fn load_ground_truth(
    path: impl AsRef<Path>,
    query_ids: &[String],
    candidate_ids: &[String],
) -> Result<BTreeMap<usize, BTreeSet<usize>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&text, query_ids, candidate_ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
}

impl Recalls {
    pub fn values(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i2t: Option<Recalls>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t2i: Option<Recalls>,
    pub mean_recall: f64,
}

/// Rank (0-based) of `cand` in `scores`: higher scores first, ties to the
/// lower index.
pub fn rank_of<T: Real>(scores: &[T], cand: usize) -> usize {
    let s = scores[cand];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < cand))
        .count()
}

/// Recall@{1,5,10} in percent for queries given by the rows of `scores`.
pub fn recall_at_k<T: Real>(
    scores: &Mat<T>,
    positives: &BTreeMap<usize, BTreeSet<usize>>,
) -> Result<Recalls> {
    let n_q = scores.rows();
    if n_q == 0 {
        return Err(Error::Data("no queries".into()));
    }
    let mut hits = [0usize; 3];
    for q in 0..n_q {
        let pos = positives
            .get(&q)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Data(format!("query {q} has no ground truth")))?;
        let row = scores.row(q);
        let mut best = usize::MAX;
        for &c in pos {
            if c >= row.len() {
                return Err(Error::Data(format!(
                    "query {q}: positive {c} out of {} candidates",
                    row.len()
                )));
            }
            best = best.min(rank_of(row, c));
        }
        for (h, &k) in hits.iter_mut().zip(&KS) {
            if best < k {
                *h += 1;
            }
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / n_q as f64;
    Ok(Recalls {
        r1: pct(hits[0]),
        r5: pct(hits[1]),
        r10: pct(hits[2]),
        queries: n_q,
    })
}

/// Arithmetic mean of all reported recalls.
pub fn mean_recall(values: &[f64]) -> Result<f64> {
    super::report_average(values)
}

/// Bidirectional (or single-direction) retrieval. `s_i2t` is images × texts,
/// `s_t2i` texts × images; pass `None` for a direction that does not exist.
pub fn retrieval_eval<T: Real>(
    s_i2t: Option<&Mat<T>>,
    s_t2i: Option<&Mat<T>>,
    gt: &RetrievalGroundTruth,
) -> Result<RetrievalReport> {
    let i2t = s_i2t
        .map(|s| recall_at_k(s, &gt.image_to_texts))
        .transpose()?;
    let t2i = s_t2i
        .map(|s| recall_at_k(s, &gt.text_to_images))
        .transpose()?;
    let mut all = Vec::new();
    for r in [&i2t, &t2i].into_iter().flatten() {
        all.extend(r.values());
    }
    if all.is_empty() {
        return Err(Error::Data("no retrieval direction requested".into()));
    }
    Ok(RetrievalReport {
        i2t,
        t2i,
        mean_recall: mean_recall(&all)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::round_to;

    #[test]
    fn identity_is_perfect() {
        let mut s = Mat::<f64>::zeros(4, 4);
        for i in 0..4 {
            s.set(i, i, 1.0);
        }
        let r = retrieval_eval(Some(&s), Some(&s), &RetrievalGroundTruth::diagonal(4)).unwrap();
        assert_eq!(r.mean_recall, 100.0);
        assert_eq!(r.i2t.unwrap().r1, 100.0);
    }

    #[test]
    fn published_mean_recalls() {
        assert_eq!(round_to(mean_recall(&[37.3, 64.2, 73.9]).unwrap(), 1), 58.5);
        assert_eq!(
            round_to(mean_recall(&[13.4, 31.2, 40.7, 8.0, 20.7, 29.5]).unwrap(), 1),
            23.9
        );
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let s = [0.5f64, 0.5, 0.9, 0.5];
        assert_eq!(rank_of(&s, 2), 0);
        assert_eq!(rank_of(&s, 0), 1);
        assert_eq!(rank_of(&s, 1), 2);
        assert_eq!(rank_of(&s, 3), 3);
    }

    #[test]
    fn missing_ground_truth_is_error() {
        let s = Mat::<f64>::zeros(2, 2);
        let gt = RetrievalGroundTruth::from_pairs([(0, 0)]);
        assert!(retrieval_eval(Some(&s), None, &gt).is_err());
    }

    #[test]
    fn ground_truth_parsing() {
        let ids: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let m = parse_ground_truth(
            "{\"query_id\":\"a\",\"positives\":[\"b\",\"a\"]}\n",
            &ids,
            &ids,
        )
        .unwrap();
        assert_eq!(m[&0], BTreeSet::from([0, 1]));
        assert!(parse_ground_truth("{\"query_id\":\"z\",\"positives\":[]}", &ids, &ids).is_err());
        let gt = RetrievalGroundTruth::from_pairs([(0, 1), (2, 1)]);
        assert!(gt.is_consistent());
        assert_eq!(gt.text_to_images[&1], BTreeSet::from([0, 2]));
    }
}
