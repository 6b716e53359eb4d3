//! Layer-wise adaptive moments optimizer.
//!
//! ```text
//! m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
//! u = m̂ / (√v̂ + ε) + λ·p      (λ = 0 for exempt tensors)
//! p ← p − lr · (‖p‖/‖u‖) · u
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-2,
            weight_decay: 0.0,
        }
    }
}

/// One parameter tensor with its gradient and decay flag.
pub struct LambTensor<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Mat<T>,
    pub grad: &'a Mat<T>,
    pub decay: bool,
}

/// First and second moments, one pair per tensor in update order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }
}

/// Trust ratio `‖p‖/‖u‖`, or 1 when either norm is zero.
pub fn trust_ratio<T: Real>(p_norm: T, u_norm: T) -> T {
    if p_norm > T::zero() && u_norm > T::zero() {
        p_norm / u_norm
    } else {
        T::one()
    }
}

/// Applies one update in place. Nothing is modified if any gradient is
/// non-finite.
pub fn lamb_step<T: Real>(
    tensors: &mut [LambTensor<'_, T>],
    state: &mut OptimizerState<T>,
    lr: T,
    cfg: &LambConfig,
) -> Result<()> {
    for t in tensors.iter() {
        if !t.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", t.name)));
        }
        if (t.grad.rows(), t.grad.cols()) != (t.param.rows(), t.param.cols()) {
            return Err(Error::Shape(format!("gradient shape of {}", t.name)));
        }
    }
    if state.m.is_empty() {
        state.m = tensors
            .iter()
            .map(|t| Mat::zeros(t.param.rows(), t.param.cols()))
            .collect();
        state.v = state.m.clone();
    }
    if state.m.len() != tensors.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let eps = T::lit(cfg.eps);
    let one = T::one();
    let c1 = one - b1.powi(state.step as i32);
    let c2 = one - b2.powi(state.step as i32);
    for (i, t) in tensors.iter_mut().enumerate() {
        let wd = if t.decay {
            T::lit(cfg.weight_decay)
        } else {
            T::zero()
        };
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let g = t.grad.as_slice();
        let p = t.param.as_slice();
        let mut u = vec![T::zero(); p.len()];
        let mut u_sq = T::zero();
        let mut p_sq = T::zero();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            u[j] = mh / (vh.sqrt() + eps) + wd * p[j];
            u_sq = u_sq + u[j] * u[j];
            p_sq = p_sq + p[j] * p[j];
        }
        let phi = trust_ratio(p_sq.sqrt(), u_sq.sqrt());
        let s = lr * phi;
        for (pj, &uj) in t.param.as_mut_slice().iter_mut().zip(&u) {
            *pj = *pj - s * uj;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = Mat::from_vec(1, 3, vec![1.0f64, -2.0, 0.5]);
        let before = p.clone();
        let g = Mat::zeros(1, 3);
        let mut st = OptimizerState::new();
        let cfg = LambConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut ts = [LambTensor {
            name: "b",
            param: &mut p,
            grad: &g,
            decay: false,
        }];
        lamb_step(&mut ts, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_hand_update() {
        // p = 2, g = 0.5, first step: m̂ = g, v̂ = g², u = g/(|g|+ε) + λp
        let (p0, g0, lr, eps, wd) = (2.0f64, 0.5, 0.1, 1e-2, 0.01);
        let mut p = Mat::from_vec(1, 1, vec![p0]);
        let g = Mat::from_vec(1, 1, vec![g0]);
        let mut st = OptimizerState::new();
        let cfg = LambConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay: wd,
        };
        let mut ts = [LambTensor {
            name: "w",
            param: &mut p,
            grad: &g,
            decay: true,
        }];
        lamb_step(&mut ts, &mut st, lr, &cfg).unwrap();
        let u = g0 / (g0 + eps) + wd * p0;
        let want = p0 - lr * (p0 / u) * u;
        assert!((p.at(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_aborts_untouched() {
        let mut p = Mat::from_vec(1, 2, vec![1.0f64, 1.0]);
        let g = Mat::from_vec(1, 2, vec![f64::NAN, 0.0]);
        let mut st = OptimizerState::new();
        let mut ts = [LambTensor {
            name: "w",
            param: &mut p,
            grad: &g,
            decay: true,
        }];
        assert!(lamb_step(&mut ts, &mut st, 0.1, &LambConfig::default()).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(p.as_slice(), &[1.0, 1.0]);
    }
}
