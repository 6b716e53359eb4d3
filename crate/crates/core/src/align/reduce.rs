//! Learned token reduction over an image token grid.
//!
//! A shared two-layer convolutional trunk (3×3 same-padded conv, GELU, 1×1
//! conv) maps the `H×W×d` grid to `n′` attention maps. Each map is squashed
//! with a sigmoid, multiplied into the spatial tokens (broadcast over
//! channels) and spatially averaged:
//!
//! ```text
//! A = conv2(gelu(conv1(z)))           H×W×n′
//! Z_k = mean_{h,w} σ(A[h,w,k]) · z[h,w]     ∈ R^d
//! ```

use rand::Rng;

use super::embedding::{EmbeddingKind, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, sigmoid, Mat, Real};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenReducer<T> {
    pub d: usize,
    pub d_mid: usize,
    pub n_prime: usize,
    /// `(9·d) × d_mid`; row `tap·d + c_in` with `tap = ky·3 + kx`.
    pub conv1_w: Mat<T>,
    /// `1 × d_mid`
    pub conv1_b: Mat<T>,
    /// `d_mid × n′`
    pub conv2_w: Mat<T>,
    /// `1 × n′`
    pub conv2_b: Mat<T>,
}

impl<T: Real> TokenReducer<T> {
    pub fn zeros(d: usize, d_mid: usize, n_prime: usize) -> Self {
        Self {
            d,
            d_mid,
            n_prime,
            conv1_w: Mat::zeros(TAPS * d, d_mid),
            conv1_b: Mat::zeros(1, d_mid),
            conv2_w: Mat::zeros(d_mid, n_prime),
            conv2_b: Mat::zeros(1, n_prime),
        }
    }

    /// Normal(0, 0.02) kernels, zero biases, `d_mid = d`.
    pub fn init<R: Rng + ?Sized>(d: usize, n_prime: usize, rng: &mut R) -> Self {
        let mut r = Self::zeros(d, d, n_prime);
        r.conv1_w = Mat::randn(TAPS * d, d, 0.02, rng);
        r.conv2_w = Mat::randn(d, n_prime, 0.02, rng);
        r
    }

    /// Weight of the 3×3 kernel from input channel `c_in` to output channel
    /// `c_out` at kernel offset `(ky, kx)`, both in `0..3`.
    pub fn conv1_weight(&self, c_out: usize, c_in: usize, ky: usize, kx: usize) -> T {
        self.conv1_w.at((ky * KERNEL + kx) * self.d + c_in, c_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prime == 0 {
            return Err(Error::Config("token reducer needs n' >= 1".into()));
        }
        let shapes_ok = self.conv1_w.rows() == TAPS * self.d
            && self.conv1_w.cols() == self.d_mid
            && self.conv1_b.cols() == self.d_mid
            && self.conv2_w.rows() == self.d_mid
            && self.conv2_w.cols() == self.n_prime
            && self.conv2_b.cols() == self.n_prime;
        if !shapes_ok {
            return Err(Error::Shape("token reducer tensors inconsistent".into()));
        }
        Ok(())
    }
}

/// Intermediates of one reduction, kept for backward.
#[derive(Debug, Clone)]
pub struct ReduceCache<T> {
    h: usize,
    w: usize,
    /// im2col patches, `HW × 9d`
    cols: Mat<T>,
    /// conv1 pre-activation, `HW × d_mid`
    pre1: Mat<T>,
    /// gelu(pre1)
    act1: Mat<T>,
    /// sigmoid gates, `HW × n′`
    pub alpha: Mat<T>,
}

fn im2col<T: Real>(z: &Mat<T>, h: usize, w: usize) -> Mat<T> {
    let d = z.cols();
    let mut cols = Mat::zeros(h * w, TAPS * d);
    for y in 0..h {
        for x in 0..w {
            let row = cols.row_mut(y * w + x);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = z.row(sy as usize * w + sx as usize);
                    let tap = ky * KERNEL + kx;
                    row[tap * d..(tap + 1) * d].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &Mat<T>, h: usize, w: usize, d: usize) -> Mat<T> {
    let mut dz = Mat::zeros(h * w, d);
    for y in 0..h {
        for x in 0..w {
            let row = dcols.row(y * w + x);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let tap = ky * KERNEL + kx;
                    let dst = dz.row_mut(sy as usize * w + sx as usize);
                    for (o, &g) in dst.iter_mut().zip(&row[tap * d..(tap + 1) * d]) {
                        *o = *o + g;
                    }
                }
            }
        }
    }
    dz
}

/// Reduces `spatial` (`H·W × d`, row-major grid) to `n′ × d`.
pub fn reduce_tokens<T: Real>(
    spatial: &Mat<T>,
    h: usize,
    w: usize,
    reducer: &TokenReducer<T>,
) -> Result<(Mat<T>, ReduceCache<T>)> {
    if h * w == 0 {
        return Err(Error::Shape("token reduction needs a non-empty grid".into()));
    }
    if spatial.rows() != h * w || spatial.cols() != reducer.d {
        return Err(Error::Shape(format!(
            "token reducer expects {}x{} grid of dim {}, got {}x{}",
            h,
            w,
            reducer.d,
            spatial.rows(),
            spatial.cols()
        )));
    }
    let cols = im2col(spatial, h, w);
    let mut pre1 = cols.matmul(&reducer.conv1_w);
    pre1.add_row_broadcast(reducer.conv1_b.as_slice());
    let mut act1 = pre1.clone();
    act1.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let mut alpha = act1.matmul(&reducer.conv2_w);
    alpha.add_row_broadcast(reducer.conv2_b.as_slice());
    alpha.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut out = alpha.t_matmul(spatial);
    out.scale(T::one() / T::from_usize(h * w).unwrap());
    Ok((
        out,
        ReduceCache {
            h,
            w,
            cols,
            pre1,
            act1,
            alpha,
        },
    ))
}

/// Backward of [`reduce_tokens`]: returns parameter gradients (as a
/// `TokenReducer`) and the gradient with respect to `spatial`.
pub fn reduce_tokens_backward<T: Real>(
    spatial: &Mat<T>,
    reducer: &TokenReducer<T>,
    cache: &ReduceCache<T>,
    d_out: &Mat<T>,
) -> (TokenReducer<T>, Mat<T>) {
    let inv_n = T::one() / T::from_usize(cache.h * cache.w).unwrap();
    // out = inv_n · αᵀ z
    let mut dz = cache.alpha.matmul(d_out);
    dz.scale(inv_n);
    let mut d_alpha = spatial.matmul_t(d_out);
    d_alpha.scale(inv_n);

    let mut d_logit = d_alpha;
    for (g, &a) in d_logit
        .as_mut_slice()
        .iter_mut()
        .zip(cache.alpha.as_slice())
    {
        *g = *g * a * (T::one() - a);
    }
    let d_conv2_w = cache.act1.t_matmul(&d_logit);
    let d_conv2_b = Mat::from_vec(1, reducer.n_prime, d_logit.col_sums());
    let mut d_pre1 = d_logit.matmul_t(&reducer.conv2_w);
    for (g, &p) in d_pre1.as_mut_slice().iter_mut().zip(cache.pre1.as_slice()) {
        *g = *g * gelu_grad(p);
    }
    let d_conv1_w = cache.cols.t_matmul(&d_pre1);
    let d_conv1_b = Mat::from_vec(1, reducer.d_mid, d_pre1.col_sums());
    let d_cols = d_pre1.matmul_t(&reducer.conv1_w);
    dz.add_assign(&col2im(&d_cols, cache.h, cache.w, reducer.d));

    (
        TokenReducer {
            d: reducer.d,
            d_mid: reducer.d_mid,
            n_prime: reducer.n_prime,
            conv1_w: d_conv1_w,
            conv1_b: d_conv1_b,
            conv2_w: d_conv2_w,
            conv2_b: d_conv2_b,
        },
        dz,
    )
}

/// Reduces the spatial tokens of an image set. Any `[CLS]` row is left out.
pub fn token_reduce<T: Real>(
    img: &EmbeddingSet<T>,
    reducer: &TokenReducer<T>,
) -> Result<EmbeddingSet<T>> {
    let (h, w) = img
        .grid
        .ok_or_else(|| Error::Shape("token reduction needs an image grid".into()))?;
    let (out, _) = reduce_tokens(&img.data.slice_rows(0, h * w), h, w, reducer)?;
    Ok(EmbeddingSet::dense(out, EmbeddingKind::Image))
}
