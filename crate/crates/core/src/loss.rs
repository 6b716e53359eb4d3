//! Symmetric temperature-scaled contrastive loss over a batch of pairwise
//! similarities.
//!
//! ```text
//! L^I_k = -(1/b) log softmax(S_I[k] / τ)_k
//! L^T_k = -(1/b) log softmax(S_T[k] / τ)_k
//! L     = ½ Σ_k (L^I_k + L^T_k)
//! ```

use crate::error::{Error, Result};
use crate::linalg::{sorted_sum, Mat, Real};

pub const INIT_TEMPERATURE: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// Learnable temperature stored as `log τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature<T> {
    pub log_tau: T,
}

impl<T: Real> Temperature<T> {
    pub fn new(tau: T) -> Self {
        Self { log_tau: tau.ln() }
    }

    /// `exp(log τ)` clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn tau(&self) -> T {
        self.log_tau
            .exp()
            .max(T::lit(TAU_MIN))
            .min(T::lit(TAU_MAX))
    }

    fn clamped(&self) -> bool {
        let t = self.log_tau.exp();
        t < T::lit(TAU_MIN) || t > T::lit(TAU_MAX)
    }
}

impl<T: Real> Default for Temperature<T> {
    fn default() -> Self {
        Self::new(T::lit(INIT_TEMPERATURE))
    }
}

/// `s_i` rows are images, `s_t` rows are texts; both `b × b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities<T> {
    pub s_i: Mat<T>,
    pub s_t: Mat<T>,
}

impl<T: Real> BatchSimilarities<T> {
    pub fn new(s_i: Mat<T>, s_t: Mat<T>) -> Result<Self> {
        let b = s_i.rows();
        if b == 0 || s_i.cols() != b || s_t.rows() != b || s_t.cols() != b {
            return Err(Error::Shape(format!(
                "similarities must be square and equal: {}x{} vs {}x{}",
                s_i.rows(),
                s_i.cols(),
                s_t.rows(),
                s_t.cols()
            )));
        }
        Ok(Self { s_i, s_t })
    }

    /// Global similarity: `S_T = S_Iᵀ`.
    pub fn symmetric(s: Mat<T>) -> Result<Self> {
        let t = s.transpose();
        Self::new(s, t)
    }

    pub fn batch_size(&self) -> usize {
        self.s_i.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad_s_i: Mat<T>,
    pub grad_s_t: Mat<T>,
    pub grad_log_tau: T,
}

struct RowCe<T> {
    ce: T,
    /// `p - onehot`
    resid: Vec<T>,
    /// `Σ_j resid_j · z_j`
    resid_dot_z: T,
}

fn row_ce<T: Real>(row: &[T], target: usize, tau: T) -> RowCe<T> {
    let z: Vec<T> = row.iter().map(|&s| s / tau).collect();
    let m = z.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let mut scratch = e.clone();
    let denom = sorted_sum(&mut scratch);
    let ce = m + denom.ln() - z[target];
    for v in e.iter_mut() {
        *v = *v / denom;
    }
    e[target] = e[target] - T::one();
    let mut prods: Vec<T> = e.iter().zip(&z).map(|(&r, &zj)| r * zj).collect();
    let resid_dot_z = sorted_sum(&mut prods);
    RowCe {
        ce,
        resid: e,
        resid_dot_z,
    }
}

/// Loss value and exact gradients with respect to both similarity matrices
/// and `log τ`. Sums run in sorted order, so jointly permuting rows and
/// columns leaves the loss bit-identical.
pub fn contrastive_loss<T: Real>(
    sims: &BatchSimilarities<T>,
    temp: &Temperature<T>,
) -> Result<LossOutput<T>> {
    if !sims.s_i.all_finite() || !sims.s_t.all_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    if !temp.log_tau.is_finite() {
        return Err(Error::NonFinite("temperature".into()));
    }
    let b = sims.batch_size();
    let tau = temp.tau();
    let scale = T::one() / T::from_usize(2 * b).unwrap();

    let mut ces = Vec::with_capacity(2 * b);
    let mut tau_terms = Vec::with_capacity(2 * b);
    let mut grad_s_i = Mat::zeros(b, b);
    let mut grad_s_t = Mat::zeros(b, b);
    for (s, g) in [(&sims.s_i, &mut grad_s_i), (&sims.s_t, &mut grad_s_t)] {
        for k in 0..b {
            let r = row_ce(s.row(k), k, tau);
            ces.push(r.ce);
            tau_terms.push(-r.resid_dot_z);
            for (gj, &rj) in g.row_mut(k).iter_mut().zip(&r.resid) {
                *gj = scale * rj / tau;
            }
        }
    }
    let loss = scale * sorted_sum(&mut ces);
    let grad_log_tau = if temp.clamped() {
        T::zero()
    } else {
        scale * sorted_sum(&mut tau_terms)
    };
    Ok(LossOutput {
        loss,
        grad_s_i,
        grad_s_t,
        grad_log_tau,
    })
}
