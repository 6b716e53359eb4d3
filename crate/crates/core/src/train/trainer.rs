use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::PairDataset;
use super::lamb::{lamb_step, LambConfig, LambTensor, OptimizerState};
use super::model::{batch_loss, ModelParams, ModelShape, SimilarityMode};
use super::schedule::lr_schedule;
use crate::align::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};
use crate::textenc::{decays, Checkpoint, TextEncoderConfig};
use crate::tokenizer::TokenSequence;

pub const CHECKPOINT_FORMAT: &str = "vlkit-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub lamb_beta1: f64,
    pub lamb_beta2: f64,
    pub lamb_eps: f64,
    pub similarity_mode: SimilarityMode,
    pub n_prime: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub width: usize,
    pub max_len: usize,
    /// Validate every this many steps; 0 means once per epoch.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            steps: None,
            peak_lr: 1e-2,
            warmup_steps: 0,
            weight_decay: 0.0,
            lamb_beta1: 0.9,
            lamb_beta2: 0.999,
            lamb_eps: 1e-2,
            similarity_mode: SimilarityMode::Global,
            n_prime: 12,
            seed: 0,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            width: 64,
            max_len: 32,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            beta1: self.lamb_beta1,
            beta2: self.lamb_beta2,
            eps: self.lamb_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn text_config(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            width: self.width,
            max_len: self.max_len,
            vocab_size,
        }
    }

    pub fn shape(&self, vocab_size: usize, image_dim: usize) -> ModelShape {
        ModelShape {
            text: self.text_config(vocab_size),
            image_dim,
            embed_dim: self.embed_dim,
            n_prime: self.n_prime,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.min(n).max(1))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * self.steps_per_epoch(n))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.lamb_beta1) || !open(self.lamb_beta2) {
            return Err(Error::Config("LAMB betas must lie in (0, 1)".into()));
        }
        if !(self.lamb_eps > 0.0) || self.weight_decay < 0.0 || !(self.peak_lr >= 0.0) {
            return Err(Error::Config(
                "lamb_eps must be positive, weight_decay and peak_lr non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_steps > self.total_steps(n) {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total steps {}",
                self.warmup_steps,
                self.total_steps(n)
            )));
        }
        self.text_config(1).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Step(StepLog),
    Val {
        step: usize,
        val_loss: f64,
        val_r1_i2t: f64,
        val_r1_t2i: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams<f32>,
    pub opt: OptimizerState<f32>,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, vocab_size: usize, image_dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model: ModelParams::init(cfg.shape(vocab_size, image_dim), &mut rng)?,
            opt: OptimizerState::new(),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "shape": self.model.shape,
            "train": cfg,
            "step": self.step,
            "opt_step": self.opt.step,
            "tau": self.model.temperature().tau(),
        }));
        let names: Vec<String> = self.model.named().into_iter().map(|(n, _)| n).collect();
        for (n, t) in self.model.named() {
            ck.push(n, t);
        }
        if !self.opt.m.is_empty() {
            for (n, m) in names.iter().zip(&self.opt.m) {
                ck.push(format!("opt.m.{n}"), m);
            }
            for (n, v) in names.iter().zip(&self.opt.v) {
                ck.push(format!("opt.v.{n}"), v);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let model = load_model(ck)?;
        let cfg: TrainConfig = serde_json::from_value(ck.header["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("train config: {e}")))?;
        let step = ck.header["step"].as_u64().unwrap_or(0) as usize;
        let mut opt = OptimizerState::new();
        opt.step = ck.header["opt_step"].as_u64().unwrap_or(0);
        let names: Vec<(String, usize, usize)> = model
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.rows(), t.cols()))
            .collect();
        if ck.has(&format!("opt.m.{}", names[0].0)) {
            for (n, r, c) in &names {
                let mut m = Mat::zeros(*r, *c);
                ck.load_into(&format!("opt.m.{n}"), &mut m)?;
                opt.m.push(m);
                let mut v = Mat::zeros(*r, *c);
                ck.load_into(&format!("opt.v.{n}"), &mut v)?;
                opt.v.push(v);
            }
        }
        Ok((Self { model, opt, step }, cfg))
    }
}

/// Model parameters stored in a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<ModelParams<f32>> {
    if ck.header["format"] != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let shape: ModelShape = serde_json::from_value(ck.header["shape"].clone())
        .map_err(|e| Error::Checkpoint(format!("model shape: {e}")))?;
    shape.text.validate()?;
    let mut model = ModelParams::zeros(shape);
    for (n, t) in model.named_mut() {
        ck.load_into(&n, t)?;
    }
    Ok(model)
}

/// SHA-256 over every model tensor (name, shape, little-endian values).
/// Optimizer moments and step counters are not included.
pub fn model_digest(model: &ModelParams<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rows() as u32).to_le_bytes());
        h.update((t.cols() as u32).to_le_bytes());
        for x in t.as_slice() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1));
    idx.shuffle(&mut rng);
    idx
}

/// Indices of the pairs used at 1-based step `step`.
pub fn batch_indices(cfg: &TrainConfig, n: usize, step: usize) -> Vec<usize> {
    let per_epoch = cfg.steps_per_epoch(n);
    let bs = cfg.batch_size.min(n);
    let epoch = (step - 1) / per_epoch;
    let pos = (step - 1) % per_epoch;
    let order = epoch_order(n, cfg.seed, epoch);
    order[pos * bs..((pos + 1) * bs).min(n)].to_vec()
}

fn r_at_1<T: Real>(s: &Mat<T>) -> usize {
    (0..s.rows())
        .filter(|&q| {
            let row = s.row(q);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == q
        })
        .count()
}

/// In-batch loss and Recall@1 over consecutive chunks of `batch_size` pairs.
/// Nothing is mutated.
pub fn validate<T: Real>(
    model: &ModelParams<T>,
    images: &[EmbeddingSet<T>],
    seqs: &[TokenSequence],
    mode: SimilarityMode,
    batch_size: usize,
) -> Result<Validation> {
    let n = images.len();
    if n == 0 || seqs.len() != n {
        return Err(Error::Data("validation needs matching, non-empty pairs".into()));
    }
    let bs = batch_size.clamp(1, n);
    let (mut loss, mut hit_i, mut hit_t) = (0.0, 0, 0);
    for start in (0..n).step_by(bs) {
        let end = (start + bs).min(n);
        let imgs: Vec<&EmbeddingSet<T>> = images[start..end].iter().collect();
        let txts: Vec<&TokenSequence> = seqs[start..end].iter().collect();
        let r = batch_loss(model, &imgs, &txts, mode, false)?;
        loss += r.loss.to_f64_lossy() * (end - start) as f64;
        hit_i += r_at_1(&r.sims.s_i);
        hit_t += r_at_1(&r.sims.s_t);
    }
    Ok(Validation {
        loss: loss / n as f64,
        r1_i2t: hit_i as f64 / n as f64,
        r1_t2i: hit_t as f64 / n as f64,
        pairs: n,
    })
}

/// Runs the training loop from `state` up to the configured number of
/// steps. Image embeddings are read, never written.
pub fn lit_train(
    data: &PairDataset,
    val: Option<&PairDataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut dyn FnMut(LogLine),
) -> Result<()> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    cfg.validate(n)?;
    let total = cfg.total_steps(n);
    let lamb = cfg.lamb();
    let val_every = if cfg.val_every == 0 {
        cfg.steps_per_epoch(n)
    } else {
        cfg.val_every
    };
    let decay: Vec<bool> = state
        .model
        .named()
        .iter()
        .map(|(name, _)| decays(name))
        .collect();
    let val_set = val.unwrap_or(data);

    while state.step < total {
        let step = state.step + 1;
        let idx = batch_indices(cfg, n, step);
        let imgs: Vec<&EmbeddingSet<f32>> = idx.iter().map(|&i| &data.images[i]).collect();
        let txts: Vec<&TokenSequence> = idx.iter().map(|&i| &data.seqs[i]).collect();
        let r = batch_loss(&state.model, &imgs, &txts, cfg.similarity_mode, true)?;
        let grads = r.grads.expect("gradients requested");
        let lr = lr_schedule(step, cfg.warmup_steps, total, cfg.peak_lr);
        log(LogLine::Step(StepLog {
            step,
            lr,
            loss: r.loss as f64,
            tau: state.model.temperature().tau() as f64,
        }));
        {
            let grad_named = grads.named();
            let mut tensors: Vec<LambTensor<'_, f32>> = state
                .model
                .named_mut()
                .into_iter()
                .zip(&grad_named)
                .zip(&decay)
                .map(|(((_, p), (name, g)), &d)| LambTensor {
                    name: name.as_str(),
                    param: p,
                    grad: *g,
                    decay: d,
                })
                .collect();
            lamb_step(&mut tensors, &mut state.opt, lr as f32, &lamb)?;
        }
        state.model.clamp_temperature();
        state.step = step;
        if step % val_every == 0 || step == total {
            let v = validate(
                &state.model,
                &val_set.images,
                &val_set.seqs,
                cfg.similarity_mode,
                cfg.batch_size,
            )?;
            log(LogLine::Val {
                step,
                val_loss: v.loss,
                val_r1_i2t: v.r1_i2t,
                val_r1_t2i: v.r1_t2i,
            });
        }
    }
    Ok(())
}
