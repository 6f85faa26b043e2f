//! A small bidirectional masked-diffusion transformer: forward corruption,
//! denoiser network with rotary attention and pluggable attention-permission
//! structure, masked reconstruction loss, manual gradients, and block-wise
//! remasking generation.

mod checkpoint;
mod corrupt;
mod generate;
mod net;

pub use checkpoint::{
    extend_checkpoint, load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_FORMAT,
};
pub use corrupt::{corrupt, NoisySample};
pub use generate::{denoise_generate, RemaskPolicy};
pub use net::{
    batch_loss_and_grad, forward, forward_logits, grad_check_max_rel_err, loss_and_grad,
    masked_nll, LossWeighting, RMS_EPS,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{mix_seeds, stream, Real};
use crate::rope::RopeConfig;
use crate::tokenizer::{EOD_ID, MASK_ID, PAD_ID, VOCAB_SIZE};

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_mlp_multiplier() -> usize {
    4
}

/// Architecture hyperparameters; everything needed to size [`Parameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size including the reserved mask/end-of-document/pad ids.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-head width; `n_heads * head_dim == d_model`.
    pub head_dim: usize,
    /// Longest sequence the model will be run at (sizes the rotary table).
    pub max_positions: usize,
    pub rope: RopeConfig,
    /// Feed-forward hidden width as a multiple of `d_model`.
    #[serde(default = "default_mlp_multiplier")]
    pub mlp_multiplier: usize,
}

impl ModelConfig {
    /// Byte-vocabulary model with an identity (unextended) rotary config.
    pub fn byte_level(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        context: usize,
        rope_base: f64,
    ) -> Self {
        let head_dim = d_model / n_heads.max(1);
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model,
            n_layers,
            n_heads,
            head_dim,
            max_positions: context,
            rope: RopeConfig::identity(rope_base, head_dim, context),
            mlp_multiplier: 4,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.mlp_multiplier * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::config(format!(
                "vocab_size {} cannot hold the reserved ids {}/{}/{}",
                self.vocab_size, MASK_ID, EOD_ID, PAD_ID
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config(
                "d_model, n_layers, and n_heads must be positive",
            ));
        }
        if self.head_dim % 2 != 0 || self.head_dim == 0 {
            return Err(Error::config(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::config(format!(
                "n_heads {} * head_dim {} != d_model {}",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::config("max_positions must be positive"));
        }
        if self.mlp_multiplier == 0 {
            return Err(Error::config("mlp_multiplier must be positive"));
        }
        self.rope.validate()?;
        if self.rope.head_dim != self.head_dim {
            return Err(Error::config(format!(
                "rope head_dim {} does not match model head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Per-layer weights. All projections are stored row-major as
/// (input_dim × output_dim); activations multiply from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_g: Vec<T>, // d_model
    pub wq: Vec<T>,          // d_model × d_model
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm_g: Vec<T>, // d_model
    pub w_up: Vec<T>,       // d_model × ffn_hidden
    pub w_down: Vec<T>,     // ffn_hidden × d_model
}

/// All learnable weights. No biases anywhere; norms carry gains only; the
/// output head is untied from the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub embed: Vec<T>, // vocab × d_model
    pub layers: Vec<LayerParams<T>>,
    pub head: Vec<T>, // d_model × vocab
}

/// Standard deviation used for all weight matrices at initialization.
pub const INIT_STD: f64 = 0.02;

impl<T: Real> Parameters<T> {
    /// Gaussian init (std [`INIT_STD`]) for matrices, ones for norm gains.
    /// Deterministic in `seed`; tensors are filled in declaration order from
    /// one derived stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::math::rng_for(&[seed, stream::INIT]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let fill = |len: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<T> {
            (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
        };
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let embed = fill(cfg.vocab_size * d, &mut rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                attn_norm_g: vec![T::one(); d],
                wq: fill(d * d, &mut rng),
                wk: fill(d * d, &mut rng),
                wv: fill(d * d, &mut rng),
                wo: fill(d * d, &mut rng),
                ffn_norm_g: vec![T::one(); d],
                w_up: fill(d * h, &mut rng),
                w_down: fill(h * d, &mut rng),
            });
        }
        let head = fill(d * cfg.vocab_size, &mut rng);
        Ok(Parameters { embed, layers, head })
    }

    /// Zero-filled parameters with the same shapes (gradient accumulators,
    /// optimizer moments).
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let layer = || LayerParams {
            attn_norm_g: vec![T::zero(); d],
            wq: vec![T::zero(); d * d],
            wk: vec![T::zero(); d * d],
            wv: vec![T::zero(); d * d],
            wo: vec![T::zero(); d * d],
            ffn_norm_g: vec![T::zero(); d],
            w_up: vec![T::zero(); d * h],
            w_down: vec![T::zero(); h * d],
        };
        Ok(Parameters {
            embed: vec![T::zero(); cfg.vocab_size * d],
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            head: vec![T::zero(); d * cfg.vocab_size],
        })
    }

    /// Named tensors in the fixed declaration order used by checkpoints.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![("embed".into(), &self.embed[..])];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm_g"), &l.attn_norm_g[..]));
            out.push((format!("layers.{i}.wq"), &l.wq[..]));
            out.push((format!("layers.{i}.wk"), &l.wk[..]));
            out.push((format!("layers.{i}.wv"), &l.wv[..]));
            out.push((format!("layers.{i}.wo"), &l.wo[..]));
            out.push((format!("layers.{i}.ffn_norm_g"), &l.ffn_norm_g[..]));
            out.push((format!("layers.{i}.w_up"), &l.w_up[..]));
            out.push((format!("layers.{i}.w_down"), &l.w_down[..]));
        }
        out.push(("head".into(), &self.head[..]));
        out
    }

    /// Mutable view in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![("embed".into(), &mut self.embed[..])];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm_g"), &mut l.attn_norm_g[..]));
            out.push((format!("layers.{i}.wq"), &mut l.wq[..]));
            out.push((format!("layers.{i}.wk"), &mut l.wk[..]));
            out.push((format!("layers.{i}.wv"), &mut l.wv[..]));
            out.push((format!("layers.{i}.wo"), &mut l.wo[..]));
            out.push((format!("layers.{i}.ffn_norm_g"), &mut l.ffn_norm_g[..]));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up[..]));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down[..]));
        }
        out.push(("head".into(), &mut self.head[..]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// self += other * factor, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters<T>, factor: T) {
        let others = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(others) {
            debug_assert_eq!(dst.len(), src.len());
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s * factor;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v = *v * factor;
            }
        }
    }

    /// Global L2 norm over all tensors, accumulated in f64 in fixed order.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, t) in self.tensors() {
            for &v in t {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}

/// Derive the per-(purpose, indices) RNG seed for a model run. Thin wrapper
/// over [`mix_seeds`] so call sites read uniformly.
pub fn derive_seed(master: u64, purpose: u64, indices: &[u64]) -> u64 {
    let mut parts = vec![master, purpose];
    parts.extend_from_slice(indices);
    mix_seeds(&parts)
}
