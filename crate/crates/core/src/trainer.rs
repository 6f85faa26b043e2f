//! Post-training loop: AdamW with decoupled weight decay, linear warmup into
//! a cosine decay, global-norm gradient clipping, and stateless data
//! ordering so a resumed run is bit-identical to an uninterrupted one.
//!
//! All randomness derives from `(seed, stream, index)` tuples: the shuffle
//! for epoch `e` and the corruption draw for `(step, slot)` never depend on
//! how many steps ran before, which is what makes resumption exact.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{rng_for, stream};
use crate::model::{
    batch_loss_and_grad, corrupt, LossWeighting, ModelConfig, NoisySample, Parameters,
};
use crate::packing::{PackStrategy, PackedSequence};
use crate::rope::RotaryTable;

fn d_peak_lr() -> f64 {
    2e-5
}
fn d_min_lr() -> f64 {
    2e-6
}
fn d_warmup_frac() -> f64 {
    0.03
}
fn d_decay_iters() -> u64 {
    400
}
fn d_total_iters() -> u64 {
    600
}
fn d_weight_decay() -> f64 {
    0.1
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip_norm() -> f64 {
    1.0
}
fn d_batch_tokens() -> usize {
    65536
}

/// Optimization hyperparameters. The defaults are the context-extension
/// post-training recipe; toy runs should raise the learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    /// Warmup length as a fraction of `decay_iters`.
    #[serde(default = "d_warmup_frac")]
    pub warmup_frac: f64,
    /// Step at which cosine decay bottoms out; the rate stays at `min_lr`
    /// from here to `total_iters`.
    #[serde(default = "d_decay_iters")]
    pub decay_iters: u64,
    #[serde(default = "d_total_iters")]
    pub total_iters: u64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Gradients are rescaled to this global L2 norm when they exceed it.
    #[serde(default = "d_clip_norm")]
    pub clip_norm: f64,
    /// Approximate tokens per optimizer step; batch size in sequences is
    /// `max(1, batch_tokens / sequence_length)`.
    #[serde(default = "d_batch_tokens")]
    pub batch_tokens: usize,
    /// Master seed; every random draw in the run derives from it.
    #[serde(default)]
    pub seed: u64,
    /// Packing strategy the training corpus should be prepared with. Read
    /// by the pipeline when it packs; the loop itself uses each sequence's
    /// recorded strategy.
    #[serde(default)]
    pub strategy: PackStrategy,
    #[serde(default)]
    pub weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.decay_iters as f64).ceil() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::config(format!(
                "need 0 < min_lr <= peak_lr, got {} and {}",
                self.min_lr, self.peak_lr
            )));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::config(format!(
                "warmup_frac must lie in (0, 1), got {}",
                self.warmup_frac
            )));
        }
        // total_iters may fall short of decay_iters: the schedule is a pure
        // function of the step, and a run is allowed to stop early.
        if self.decay_iters == 0 || self.total_iters == 0 {
            return Err(Error::config("decay_iters and total_iters must be positive"));
        }
        if self.warmup_steps() >= self.decay_iters {
            return Err(Error::config("warmup would consume the whole decay phase"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::config("eps and clip_norm must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at a zero-based step: linear ramp from zero over the warmup
/// steps, cosine from peak to min until `decay_iters`, constant after.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    let ws = cfg.warmup_steps();
    if step < ws {
        return cfg.peak_lr * step as f64 / ws as f64;
    }
    if step < cfg.decay_iters {
        let progress = (step - ws) as f64 / (cfg.decay_iters - ws) as f64;
        // Convex combination rather than `min + 0.5*(peak-min)*(1+cos)`: with
        // w = 1 at the warmup seam this returns `peak_lr` bit-exactly.
        let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        return cfg.peak_lr * w + cfg.min_lr * (1.0 - w);
    }
    cfg.min_lr
}

/// AdamW first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Parameters<f32>,
    pub v: Parameters<f32>,
}

impl OptimState {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(OptimState { m: Parameters::zeros(cfg)?, v: Parameters::zeros(cfg)? })
    }
}

/// Rescale `grads` to `clip_norm` if their global L2 norm exceeds it;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Parameters<f32>, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale((clip_norm / norm) as f32);
    }
    norm
}

/// One AdamW update. `step_t` is the one-based optimizer step used for bias
/// correction. Weight decay is decoupled and uses the pre-update parameter.
/// Per-element arithmetic runs in f64 before storing back to f32.
pub fn adamw_update(
    params: &mut Parameters<f32>,
    grads: &Parameters<f32>,
    opt: &mut OptimState,
    cfg: &TrainConfig,
    lr: f64,
    step_t: u64,
) {
    let c1 = 1.0 - cfg.beta1.powi(step_t as i32);
    let c2 = 1.0 - cfg.beta2.powi(step_t as i32);
    let g_tensors = grads.tensors();
    let mut m_tensors = opt.m.tensors_mut();
    let mut v_tensors = opt.v.tensors_mut();
    for (ti, (_, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = g_tensors[ti].1;
        let m = &mut m_tensors[ti].1;
        let v = &mut v_tensors[ti].1;
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mhat = mi / c1;
            let vhat = vi / c2;
            let pd = p[i] as f64;
            p[i] = (pd - lr * mhat / (vhat.sqrt() + cfg.eps) - lr * cfg.weight_decay * pd) as f32;
        }
    }
}

/// Hex SHA-256 over the corrupted token streams of a batch; identifies the
/// exact batch content in abort reports.
pub fn batch_digest(samples: &[NoisySample]) -> String {
    let mut hasher = Sha256::new();
    for s in samples {
        hasher.update((s.x_t.len() as u64).to_le_bytes());
        for &t in &s.x_t {
            hasher.update(t.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

/// What a finished (or resumed-and-finished) run reports back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub final_loss: f64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

/// Run steps `start_step..total_iters` over the packed corpus, updating
/// `params` and `opt` in place. Pass the checkpointed moments and step to
/// resume; the result is bit-identical to a run that never stopped.
///
/// Aborts with [`Error::NonFinite`] — carrying the step and batch digest —
/// the moment a loss or gradient stops being finite.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    params: &mut Parameters<f32>,
    opt: &mut OptimState,
    start_step: u64,
    sequences: &[PackedSequence],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::input("no training sequences"));
    }
    let seq_len = sequences[0].tokens.len();
    if sequences.iter().any(|s| s.tokens.len() != seq_len) {
        return Err(Error::input("training sequences must share one length"));
    }
    if seq_len > model_cfg.max_positions {
        return Err(Error::input(format!(
            "sequence length {seq_len} exceeds the model's {} positions",
            model_cfg.max_positions
        )));
    }
    let table = RotaryTable::<f32>::for_config(&model_cfg.rope, seq_len)?;
    let batch_size = (train_cfg.batch_tokens / seq_len).max(1).min(sequences.len());
    let batches_per_epoch = sequences.len().div_ceil(batch_size) as u64;

    // Tokens consumed by steps before `start_step`, honoring the shorter
    // trailing batch of each epoch, so a resumed log continues seamlessly.
    let tokens_before = |step: u64| -> u64 {
        let n = sequences.len() as u64;
        let full_epochs = step / batches_per_epoch;
        let rem_chunks = step % batches_per_epoch;
        (full_epochs * n + (rem_chunks * batch_size as u64).min(n)) * seq_len as u64
    };

    let start = Instant::now();
    let mut tokens_seen: u64 = tokens_before(start_step);
    let mut last_loss = f64::NAN;
    let mut steps_run = 0u64;
    let mut epoch_cache: Option<(u64, Vec<usize>)> = None;

    for step in start_step..train_cfg.total_iters {
        let epoch = step / batches_per_epoch;
        let chunk = (step % batches_per_epoch) as usize;
        if !matches!(&epoch_cache, Some((e, _)) if *e == epoch) {
            let mut p: Vec<usize> = (0..sequences.len()).collect();
            let mut rng = rng_for(&[train_cfg.seed, stream::DATA_ORDER, epoch]);
            p.shuffle(&mut rng);
            epoch_cache = Some((epoch, p));
        }
        let perm = &epoch_cache.as_ref().expect("just filled").1;
        let lo = chunk * batch_size;
        let hi = (lo + batch_size).min(perm.len());

        let mut batch = Vec::with_capacity(hi - lo);
        for (slot, &seq_idx) in perm[lo..hi].iter().enumerate() {
            let seq = &sequences[seq_idx];
            let mut rng = rng_for(&[train_cfg.seed, stream::NOISE, step, slot as u64]);
            let t: f64 = rng.random();
            let sample = corrupt(&seq.tokens, t, &mut rng)?;
            batch.push((sample, seq.mask_spec()));
        }

        let (loss, mut grads) =
            batch_loss_and_grad(model_cfg, params, &table, &batch, train_cfg.weighting)?;
        if !loss.is_finite() || !grads.all_finite() {
            let samples: Vec<NoisySample> = batch.into_iter().map(|(s, _)| s).collect();
            return Err(Error::NonFinite { step, batch_digest: batch_digest(&samples) });
        }
        let grad_norm = clip_global_norm(&mut grads, train_cfg.clip_norm);
        let lr = lr_at(train_cfg, step);
        adamw_update(params, &grads, opt, train_cfg, lr, step + 1);
        if !params.all_finite() {
            let samples: Vec<NoisySample> = batch.into_iter().map(|(s, _)| s).collect();
            return Err(Error::NonFinite { step, batch_digest: batch_digest(&samples) });
        }

        tokens_seen += batch.iter().map(|(s, _)| s.x_t.len() as u64).sum::<u64>();
        last_loss = loss;
        steps_run += 1;
        if let Some(w) = log.as_mut() {
            let record = LogRecord {
                step,
                lr,
                loss,
                grad_norm,
                tokens_seen,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            serde_json::to_writer(&mut **w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(TrainSummary {
        steps_run,
        final_step: train_cfg.total_iters,
        final_loss: last_loss,
        tokens_seen,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn defaults_match_the_recipe() {
        let c = cfg();
        assert_eq!(c.peak_lr, 2e-5);
        assert_eq!(c.min_lr, 2e-6);
        assert_eq!(c.warmup_frac, 0.03);
        assert_eq!(c.decay_iters, 400);
        assert_eq!(c.total_iters, 600);
        assert_eq!(c.weight_decay, 0.1);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.95));
        assert_eq!(c.clip_norm, 1.0);
        assert_eq!(c.batch_tokens, 65536);
        assert_eq!(c.strategy, PackStrategy::Adaptive);
        assert_eq!(c.weighting, LossWeighting::Uniform);
        c.validate().unwrap();
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        let ws = c.warmup_steps();
        assert_eq!(ws, 12); // ceil(0.03 * 400)
        assert_eq!(lr_at(&c, 0), 0.0);
        // Strictly increasing ramp that lands exactly on the peak.
        for s in 1..=ws {
            assert!(lr_at(&c, s) > lr_at(&c, s - 1));
        }
        assert_eq!(lr_at(&c, ws), c.peak_lr);
        // Cosine midpoint sits at the average of peak and min.
        let mid = ws + (c.decay_iters - ws) / 2;
        assert!((lr_at(&c, mid) - 0.5 * (c.peak_lr + c.min_lr)).abs() < 1e-12 * c.peak_lr);
        // Monotone decay to the floor, then flat.
        for s in ws + 1..=c.decay_iters {
            assert!(lr_at(&c, s) < lr_at(&c, s - 1));
        }
        assert!((lr_at(&c, c.decay_iters) - c.min_lr).abs() < 1e-18);
        for s in c.decay_iters..c.total_iters {
            assert_eq!(lr_at(&c, s), c.min_lr);
        }
        // No jump at the warmup/cosine seam.
        let step_size = c.peak_lr / ws as f64;
        assert!((lr_at(&c, ws) - lr_at(&c, ws - 1)) < 1.5 * step_size);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = cfg();
        c.min_lr = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.warmup_frac = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.total_iters = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.total_iters = 10; // stopping before the decay finishes is fine
        assert!(c.validate().is_ok());
        let mut c = cfg();
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.warmup_frac = 0.999;
        c.decay_iters = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn clipping_rescales_only_above_threshold() {
        let model = ModelConfig::byte_level(32, 1, 2, 16, 10_000.0);
        let mut g = Parameters::<f32>::zeros(&model).unwrap();
        g.embed[0] = 6.0;
        g.embed[1] = 8.0; // norm 10
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 10.0).abs() < 1e-6);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);

        let mut g = Parameters::<f32>::zeros(&model).unwrap();
        g.embed[0] = 0.3;
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 0.3).abs() < 1e-7);
        assert_eq!(g.embed[0], 0.3); // untouched below the threshold
    }

    #[test]
    fn zero_gradient_update_is_pure_weight_decay() {
        let model = ModelConfig::byte_level(32, 1, 2, 16, 10_000.0);
        let mut params = Parameters::<f32>::init(&model, 1).unwrap();
        let before = params.clone();
        let zeros = Parameters::<f32>::zeros(&model).unwrap();
        let mut opt = OptimState::zeros(&model).unwrap();
        let c = cfg();
        let lr = 1e-2;
        adamw_update(&mut params, &zeros, &mut opt, &c, lr, 1);
        for ((_, a), (_, b)) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let yd = *y as f64;
                assert_eq!(*x, (yd - lr * c.weight_decay * yd) as f32);
            }
        }
        // Moments stay at zero.
        assert_eq!(opt.m.global_norm(), 0.0);
        assert_eq!(opt.v.global_norm(), 0.0);
    }

    #[test]
    fn log_records_round_trip() {
        let r = LogRecord {
            step: 3,
            lr: 1.5e-5,
            loss: 5.25,
            grad_norm: 0.75,
            tokens_seen: 4096,
            wall_ms: 12,
        };
        let line = serde_json::to_string(&r).unwrap();
        let back: LogRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.step, 3);
        assert_eq!(back.loss, 5.25);
        assert!(line.starts_with("{\"step\":3,"));
    }
}
