use rand::Rng;

use super::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat, Real};

/// Linear map into the shared embedding space (no bias).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    /// `d_in × d_out`
    pub weight: Mat<T>,
}

impl<T: Real> ProjectionHead<T> {
    pub fn new(weight: Mat<T>) -> Self {
        Self { weight }
    }

    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Mat::randn(d_in, d_out, 0.02, rng),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Mat::zeros(d, d);
        for i in 0..d {
            w.set(i, i, T::one());
        }
        Self { weight: w }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Output of [`project_rows`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Projected<T> {
    /// Unit-norm rows.
    pub out: Mat<T>,
    /// Norms of the pre-normalization rows.
    pub norms: Vec<T>,
}

/// `y_r = x_r·W / ‖x_r·W‖₂` for every row.
pub fn project_rows<T: Real>(x: &Mat<T>, head: &ProjectionHead<T>) -> Result<Projected<T>> {
    if x.cols() != head.d_in() {
        return Err(Error::Shape(format!(
            "projection expects d_in {}, got {}",
            head.d_in(),
            x.cols()
        )));
    }
    let mut out = x.matmul(&head.weight);
    let mut norms = Vec::with_capacity(out.rows());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = dot(row, row).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::ZeroNorm { row: r });
        }
        row.iter_mut().for_each(|v| *v = *v / n);
        norms.push(n);
    }
    Ok(Projected { out, norms })
}

/// Vector-Jacobian product of [`project_rows`]: returns `(dx, dW)`.
pub fn project_rows_backward<T: Real>(
    x: &Mat<T>,
    head: &ProjectionHead<T>,
    fwd: &Projected<T>,
    d_out: &Mat<T>,
) -> (Mat<T>, Mat<T>) {
    // dz = (g - y (y·g)) / ‖z‖
    let mut dz = d_out.clone();
    for r in 0..dz.rows() {
        let y = fwd.out.row(r);
        let yg = dot(y, d_out.row(r));
        let n = fwd.norms[r];
        for (g, &yv) in dz.row_mut(r).iter_mut().zip(y) {
            *g = (*g - yv * yg) / n;
        }
    }
    let dw = x.t_matmul(&dz);
    let dx = dz.matmul_t(&head.weight);
    (dx, dw)
}

/// Projects and L2-normalizes every unmasked row; masked rows come out zero.
pub fn l2_project<T: Real>(
    embeds: &EmbeddingSet<T>,
    head: &ProjectionHead<T>,
) -> Result<EmbeddingSet<T>> {
    let rows = embeds.unmasked();
    let p = project_rows(&embeds.data.select_rows(&rows), head).map_err(|e| match e {
        Error::ZeroNorm { row } => Error::ZeroNorm { row: rows[row] },
        other => other,
    })?;
    let mut data = Mat::zeros(embeds.n_tokens(), head.d_out());
    for (i, &r) in rows.iter().enumerate() {
        data.row_mut(r).copy_from_slice(p.out.row(i));
    }
    EmbeddingSet::new(data, embeds.grid, embeds.mask.clone(), embeds.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::EmbeddingKind;

    #[test]
    fn identity_head_normalizes() {
        let set = EmbeddingSet::dense(Mat::from_vec(1, 2, vec![3.0f64, 4.0]), EmbeddingKind::Text);
        let p = l2_project(&set, &ProjectionHead::identity(2)).unwrap();
        assert!((p.data.at(0, 0) - 0.6).abs() < 1e-12);
        assert!((p.data.at(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_zeroed_and_zero_norm_errors() {
        let set = EmbeddingSet::new(
            Mat::from_vec(2, 2, vec![1.0f64, 1.0, 5.0, 5.0]),
            None,
            vec![1, 0],
            EmbeddingKind::Text,
        )
        .unwrap();
        let p = l2_project(&set, &ProjectionHead::identity(2)).unwrap();
        assert_eq!(p.data.row(1), &[0.0, 0.0]);

        let zero = EmbeddingSet::dense(Mat::<f64>::zeros(2, 2), EmbeddingKind::Text);
        assert!(matches!(
            l2_project(&zero, &ProjectionHead::identity(2)),
            Err(Error::ZeroNorm { row: 0 })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let set = EmbeddingSet::dense(Mat::<f64>::zeros(1, 3), EmbeddingKind::Text);
        assert!(matches!(
            l2_project(&set, &ProjectionHead::identity(2)),
            Err(Error::Shape(_))
        ));
    }
}
