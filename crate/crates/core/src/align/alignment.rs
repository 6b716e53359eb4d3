use super::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, Real};

/// For every spatial image token, the text position with the highest dot
/// product. Positions are indices into the text sequence (0 is `[CLS]`);
/// padded positions never win and ties go to the lowest position.
pub fn word_patch_alignment<T: Real>(
    img: &EmbeddingSet<T>,
    txt: &EmbeddingSet<T>,
) -> Result<Vec<Vec<usize>>> {
    let (h, w) = img
        .grid
        .ok_or_else(|| Error::Shape("alignment needs an image grid".into()))?;
    if img.dim() != txt.dim() {
        return Err(Error::Shape(format!(
            "alignment dims {} vs {}",
            img.dim(),
            txt.dim()
        )));
    }
    let cand = txt.unmasked();
    if cand.is_empty() {
        return Err(Error::NoEligibleTokens);
    }
    let mut map = vec![vec![0; w]; h];
    for (y, row) in map.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let patch = img.data.row(y * w + x);
            let mut best = cand[0];
            let mut best_v = dot(patch, txt.data.row(best));
            for &r in &cand[1..] {
                let v = dot(patch, txt.data.row(r));
                if v > best_v {
                    best = r;
                    best_v = v;
                }
            }
            *cell = best;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::EmbeddingKind;
    use crate::linalg::Mat;

    #[test]
    fn single_matching_row() {
        let img = EmbeddingSet::image_grid(
            Mat::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]),
            1,
            2,
        )
        .unwrap();
        let txt = EmbeddingSet::dense(Mat::from_rows(&[vec![0.0, 1.0]]), EmbeddingKind::Text);
        assert_eq!(word_patch_alignment(&img, &txt).unwrap(), vec![vec![0, 0]]);
    }

    #[test]
    fn only_position_two_aligns() {
        let img = EmbeddingSet::image_grid(Mat::filled(4, 3, 1.0f64), 2, 2).unwrap();
        let txt = EmbeddingSet::dense(
            Mat::from_rows(&[
                vec![1.0, -1.0, 0.0],
                vec![0.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![-1.0, 0.0, 0.0],
            ]),
            EmbeddingKind::Text,
        );
        assert_eq!(
            word_patch_alignment(&img, &txt).unwrap(),
            vec![vec![2, 2], vec![2, 2]]
        );
    }

    #[test]
    fn padded_rows_ignored_and_ties_low() {
        let img = EmbeddingSet::image_grid(Mat::from_rows(&[vec![1.0f64, 0.0]]), 1, 1).unwrap();
        let txt = EmbeddingSet::new(
            Mat::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.0], vec![9.0, 0.0]]),
            None,
            vec![1, 1, 0],
            EmbeddingKind::Text,
        )
        .unwrap();
        assert_eq!(word_patch_alignment(&img, &txt).unwrap(), vec![vec![0]]);
    }
}
