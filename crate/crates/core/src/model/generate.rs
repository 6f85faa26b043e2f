//! Block-wise any-order decoding for the masked-diffusion model.
//!
//! Generation appends `gen_len` mask tokens after the prompt and fills them
//! block by block, left to right. Within a block, a fixed number of
//! iterations each commit the positions the model is most confident about
//! (or a random subset), re-running the denoiser between iterations so later
//! commitments condition on earlier ones.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::packing::{build_mask, MaskSpec};
use crate::rope::RotaryTable;
use crate::tokenizer::MASK_ID;

use super::net::forward;
use super::{ModelConfig, Parameters};

/// How positions are chosen for commitment within a block iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemaskPolicy {
    /// Commit the highest-confidence predictions first (ties broken toward
    /// the earlier position).
    #[default]
    LowConfidence,
    /// Commit a uniformly random subset of the still-masked positions.
    Random,
}

impl RemaskPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            RemaskPolicy::LowConfidence => "low-confidence",
            RemaskPolicy::Random => "random",
        }
    }
}

impl std::fmt::Display for RemaskPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RemaskPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low-confidence" => Ok(RemaskPolicy::LowConfidence),
            "random" => Ok(RemaskPolicy::Random),
            other => Err(Error::config(format!(
                "unknown remasking policy '{other}' (expected low-confidence or random)"
            ))),
        }
    }
}

/// Masked positions that must remain after iteration `k` of `steps` in a
/// block of `block` positions: the linear schedule `ceil(block * (1 - k/steps))`.
fn remaining_after(block: usize, k: usize, steps: usize) -> usize {
    (block * (steps - k)).div_ceil(steps)
}

/// Generate `gen_len` tokens after `prompt` and return the full sequence
/// (prompt included).
///
/// The final block is allowed to be shorter than `block_size`; its commit
/// schedule uses the actual block width. `rng` is consumed only by the
/// [`RemaskPolicy::Random`] policy.
#[allow(clippy::too_many_arguments)]
pub fn denoise_generate<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    prompt: &[u32],
    gen_len: usize,
    block_size: usize,
    steps: usize,
    policy: RemaskPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    if gen_len == 0 {
        return Err(Error::input("gen_len must be positive"));
    }
    if block_size == 0 || steps == 0 {
        return Err(Error::input("block_size and steps must be positive"));
    }
    let total = prompt.len() + gen_len;
    if total > table.max_position {
        return Err(Error::input(format!(
            "prompt ({}) plus gen_len ({gen_len}) exceeds the {}-position table",
            prompt.len(),
            table.max_position
        )));
    }
    if prompt.iter().any(|&t| t == MASK_ID) {
        return Err(Error::input("prompt must not contain the mask token"));
    }

    let kv = cfg.vocab_size;
    let mask = build_mask(&MaskSpec::FullBidirectional, total)?;
    let mut seq: Vec<u32> = Vec::with_capacity(total);
    seq.extend_from_slice(prompt);
    seq.resize(total, MASK_ID);
    let mut committed = vec![false; gen_len];

    let mut b_start = 0usize;
    while b_start < gen_len {
        let block = block_size.min(gen_len - b_start);
        let mut cur = block;
        for k in 1..=steps {
            let rem = remaining_after(block, k, steps);
            let commit_n = cur - rem;
            if commit_n == 0 {
                continue;
            }
            let logits = forward(cfg, params, table, &seq, &mask)?;
            // (position, predicted token, confidence) for still-open slots.
            let mut cands: Vec<(usize, u32, f64)> = Vec::with_capacity(cur);
            for off in b_start..b_start + block {
                if committed[off] {
                    continue;
                }
                let pos = prompt.len() + off;
                let row = &logits[pos * kv..(pos + 1) * kv];
                let mut best = 0usize;
                let mut best_v = row[0];
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                let mut m = f64::NEG_INFINITY;
                for &v in row {
                    m = m.max(v.to_f64());
                }
                let mut exp_sum = 0.0f64;
                for &v in row {
                    exp_sum += (v.to_f64() - m).exp();
                }
                let conf = (best_v.to_f64() - m - exp_sum.ln()).exp();
                cands.push((pos, best as u32, conf));
            }
            debug_assert_eq!(cands.len(), cur);
            match policy {
                RemaskPolicy::LowConfidence => {
                    cands.sort_by(|a, b| {
                        b.2.partial_cmp(&a.2)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.0.cmp(&b.0))
                    });
                    for &(pos, tok, _) in cands.iter().take(commit_n) {
                        seq[pos] = tok;
                        committed[pos - prompt.len()] = true;
                    }
                }
                RemaskPolicy::Random => {
                    let picks = rand::seq::index::sample(rng, cands.len(), commit_n);
                    for idx in picks.iter() {
                        let (pos, tok, _) = cands[idx];
                        seq[pos] = tok;
                        committed[pos - prompt.len()] = true;
                    }
                }
            }
            cur = rem;
        }
        debug_assert_eq!(cur, 0, "schedule must exhaust the block");
        b_start += block;
    }
    Ok(seq)
}
