use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoderConfig {
    /// 2 layers, width 64, 4 heads, 32 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            width: 64,
            max_len: 32,
            vocab_size,
        }
    }

    /// 12 layers, 8 heads, width 512, 21128-entry vocabulary.
    pub fn full() -> Self {
        Self {
            n_layers: 12,
            n_heads: 8,
            width: 512,
            max_len: 32,
            vocab_size: 21128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "width, n_heads and vocab_size must be positive".into(),
            ));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by n_heads {}",
                self.width, self.n_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!(
                "max_len must be >= 3, got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Mat<T>,
    pub ln1_b: Mat<T>,
    /// `width × 3·width`, columns ordered q | k | v.
    pub w_qkv: Mat<T>,
    pub b_qkv: Mat<T>,
    pub w_o: Mat<T>,
    pub b_o: Mat<T>,
    pub ln2_g: Mat<T>,
    pub ln2_b: Mat<T>,
    pub w_fc: Mat<T>,
    pub b_fc: Mat<T>,
    pub w_proj: Mat<T>,
    pub b_proj: Mat<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(w: usize) -> Self {
        let hid = MLP_RATIO * w;
        Self {
            ln1_g: Mat::zeros(1, w),
            ln1_b: Mat::zeros(1, w),
            w_qkv: Mat::zeros(w, 3 * w),
            b_qkv: Mat::zeros(1, 3 * w),
            w_o: Mat::zeros(w, w),
            b_o: Mat::zeros(1, w),
            ln2_g: Mat::zeros(1, w),
            ln2_b: Mat::zeros(1, w),
            w_fc: Mat::zeros(w, hid),
            b_fc: Mat::zeros(1, hid),
            w_proj: Mat::zeros(hid, w),
            b_proj: Mat::zeros(1, w),
        }
    }

    fn named(&self) -> [(&'static str, &Mat<T>); 12] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.w_qkv", &self.w_qkv),
            ("attn.b_qkv", &self.b_qkv),
            ("attn.w_o", &self.w_o),
            ("attn.b_o", &self.b_o),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w_fc", &self.w_fc),
            ("mlp.b_fc", &self.b_fc),
            ("mlp.w_proj", &self.w_proj),
            ("mlp.b_proj", &self.b_proj),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Mat<T>); 12] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.w_qkv", &mut self.w_qkv),
            ("attn.b_qkv", &mut self.b_qkv),
            ("attn.w_o", &mut self.w_o),
            ("attn.b_o", &mut self.b_o),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp.w_fc", &mut self.w_fc),
            ("mlp.b_fc", &mut self.b_fc),
            ("mlp.w_proj", &mut self.w_proj),
            ("mlp.b_proj", &mut self.b_proj),
        ]
    }
}

/// Weights of the text tower. Also used, with identical shapes, to hold
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams<T> {
    pub config: TextEncoderConfig,
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Mat<T>,
    pub lnf_b: Mat<T>,
}

impl<T: Real> TextEncoderParams<T> {
    pub fn zeros(config: TextEncoderConfig) -> Self {
        let w = config.width;
        Self {
            config,
            tok_emb: Mat::zeros(config.vocab_size, w),
            pos_emb: Mat::zeros(config.max_len, w),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(w)).collect(),
            lnf_g: Mat::zeros(1, w),
            lnf_b: Mat::zeros(1, w),
        }
    }

    /// Normal(0, 0.02) embeddings and projections, zero biases, unit
    /// layer-norm scales.
    pub fn init<R: Rng + ?Sized>(config: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        for (name, t) in p.named_mut() {
            if name.ends_with(".g") {
                t.fill(T::one());
            } else if !is_bias(&name) {
                *t = Mat::randn(t.rows(), t.cols(), INIT_STD, rng);
            }
        }
        Ok(p)
    }

    /// A zero-filled tensor set of the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.named() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &self.lnf_g));
        out.push(("ln_f.b".to_string(), &self.lnf_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in l.named_mut() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &mut self.lnf_g));
        out.push(("ln_f.b".to_string(), &mut self.lnf_b));
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> TextEncoderParams<U> {
        TextEncoderParams {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    w_qkv: l.w_qkv.cast(),
                    b_qkv: l.b_qkv.cast(),
                    w_o: l.w_o.cast(),
                    b_o: l.b_o.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w_fc: l.w_fc.cast(),
                    b_fc: l.b_fc.cast(),
                    w_proj: l.w_proj.cast(),
                    b_proj: l.b_proj.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
        }
    }
}

/// Names of bias tensors: `*.b`, `*.b_*`.
pub fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last == "b" || last.starts_with("b_")
}

/// Whether weight decay applies to the named tensor. Biases, layer norms,
/// token and positional embeddings and the temperature are exempt.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    let layer_norm = name.split('.').any(|p| p.starts_with("ln"));
    !(is_bias(name)
        || layer_norm
        || last == "tok_emb"
        || last == "pos_emb"
        || name.contains("temperature"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_follows_convention() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = TextEncoderConfig {
            n_layers: 1,
            n_heads: 2,
            width: 8,
            max_len: 5,
            vocab_size: 11,
        };
        let p = TextEncoderParams::<f64>::init(cfg, &mut rng).unwrap();
        assert!(p.layers[0].ln1_g.as_slice().iter().all(|&x| x == 1.0));
        assert!(p.layers[0].b_qkv.as_slice().iter().all(|&x| x == 0.0));
        assert!(p.lnf_b.as_slice().iter().all(|&x| x == 0.0));
        assert!(p.tok_emb.as_slice().iter().any(|&x| x != 0.0));
        assert_eq!(p.named().len(), 2 + 12 + 2);
    }

    #[test]
    fn decay_exclusions() {
        for n in [
            "tok_emb",
            "pos_emb",
            "layers.0.ln1.g",
            "layers.1.ln2.b",
            "layers.0.attn.b_qkv",
            "layers.0.mlp.b_fc",
            "ln_f.g",
            "temperature.log_tau",
            "reducer.conv1.b",
        ] {
            assert!(!decays(n), "{n}");
        }
        for n in ["layers.0.attn.w_qkv", "layers.0.mlp.w_proj", "text_proj.w", "reducer.conv1.w"] {
            assert!(decays(n), "{n}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TextEncoderConfig::desk(100);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = TextEncoderConfig::desk(100);
        c.max_len = 2;
        assert!(c.validate().is_err());
    }
}
