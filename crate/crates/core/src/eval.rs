//! Long-context evaluation: Monte-Carlo denoising perplexity and a synthetic
//! needle-in-a-haystack retrieval grid.
//!
//! Perplexity here is `exp` of the average masked-position negative
//! log-likelihood over random `(t, mask)` draws — a denoising proxy, not an
//! autoregressive next-token perplexity. The retrieval probe hides a
//! six-digit passkey inside digit-free filler text and asks the model to
//! decode it; scoring demands the exact token span.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{fmt_sig, rng_for, stream, Real};
use crate::model::{
    corrupt, denoise_generate, forward, masked_nll, LossWeighting, ModelConfig, Parameters,
    RemaskPolicy,
};
use crate::packing::{build_mask, MaskSpec};
use crate::rope::RotaryTable;

// ---------------------------------------------------------------------------
// Monte-Carlo perplexity
// ---------------------------------------------------------------------------

/// Perplexity estimates per evaluated context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub lengths: Vec<usize>,
    pub ppl: Vec<f64>,
    pub n_draws: usize,
    pub seed: u64,
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::input("need at least one evaluation length"));
    }
    if lengths[0] == 0 {
        return Err(Error::input("evaluation lengths must be positive"));
    }
    if lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("evaluation lengths must be strictly increasing"));
    }
    Ok(())
}

/// Estimate denoising perplexity of the leading `L`-token window of
/// `stream_tokens` for each length `L`.
///
/// Each draw samples `t ~ U(0, 1)`, corrupts the window, and averages the
/// negative log-likelihood of the masked positions; draws that mask nothing
/// are redrawn from the same stream. The rotary table is sized to the
/// longest requested length, so lengths beyond the model's configured
/// context evaluate its extrapolation behavior.
pub fn estimate_ppl<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    stream_tokens: &[u32],
    lengths: &[usize],
    n_draws: usize,
    seed: u64,
) -> Result<PplReport> {
    cfg.validate()?;
    check_lengths(lengths)?;
    if n_draws == 0 {
        return Err(Error::input("need at least one Monte-Carlo draw"));
    }
    let max_len = *lengths.last().expect("non-empty");
    if stream_tokens.len() < max_len {
        return Err(Error::input(format!(
            "evaluation stream has {} tokens but the longest window needs {max_len}",
            stream_tokens.len()
        )));
    }
    let table = RotaryTable::<T>::for_config(&cfg.rope, max_len)?;
    let mut ppl = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let window = &stream_tokens[..len];
        let mask = build_mask(&MaskSpec::FullBidirectional, len)?;
        let draws: Vec<Result<f64>> = (0..n_draws as u64)
            .into_par_iter()
            .map(|draw| {
                let mut rng = rng_for(&[seed, stream::PPL, len as u64, draw]);
                let mut sample;
                let mut attempts = 0;
                loop {
                    let t: f64 = rng.random();
                    sample = corrupt(window, t, &mut rng)?;
                    if !sample.masked.is_empty() {
                        break;
                    }
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(Error::input("could not draw a non-empty mask"));
                    }
                }
                let logits = forward(cfg, params, &table, &sample.x_t, &mask)?;
                masked_nll(&logits, cfg.vocab_size, &sample, LossWeighting::Uniform)
            })
            .collect();
        let mut sum = 0.0f64;
        for d in draws {
            sum += d?;
        }
        let mean = sum / n_draws as f64;
        let p = mean.exp();
        debug_assert!(p >= 1.0 - 1e-9, "NLL is non-negative, so PPL >= 1");
        ppl.push(p);
    }
    Ok(PplReport { lengths: lengths.to_vec(), ppl, n_draws, seed })
}

/// `length,ppl` CSV with six significant digits.
pub fn ppl_csv(report: &PplReport) -> String {
    let mut out = String::from("length,ppl\n");
    for (&len, &p) in report.lengths.iter().zip(&report.ppl) {
        out.push_str(&format!("{},{}\n", len, fmt_sig(p, 6)));
    }
    out
}

// ---------------------------------------------------------------------------
// Needle in a haystack
// ---------------------------------------------------------------------------

/// Digit-free filler sentences for the haystack.
const FILLERS: &[&str] = &[
    "The museum's marble corridors echoed with quiet footsteps. ",
    "A gentle rain settled over the harbor before dawn. ",
    "The gardener pruned the roses while humming an old tune. ",
    "Merchants unloaded crates of spices along the wharf. ",
    "Lanterns flickered softly in the narrow alleyways. ",
    "The librarian shelved atlases beneath the tall windows. ",
    "Distant bells marked the hour across the sleeping town. ",
    "A kettle whistled in the back room of the bakery. ",
];

const QUESTION: &str = "What is the secret passkey? The secret passkey is ";

/// Number of generated answer tokens (six passkey digits).
pub const NIAH_ANSWER_LEN: usize = 6;

/// One retrieval probe: a haystack with an embedded passkey sentence,
/// followed by a question whose continuation is the passkey itself.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahInstance {
    /// Haystack plus question; `length - NIAH_ANSWER_LEN` tokens.
    pub prompt: Vec<u32>,
    /// The six digit tokens the model should produce.
    pub answer: Vec<u32>,
    /// Token offset of the needle sentence inside the haystack.
    pub needle_pos: usize,
}

/// Build a probe whose prompt plus answer totals exactly `length` tokens,
/// with the needle sentence starting at `depth` (0 = front, 1 = back) of the
/// haystack. Deterministic in the RNG.
pub fn gen_niah(length: usize, depth: f64, rng: &mut ChaCha8Rng) -> Result<NiahInstance> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::input(format!("depth must lie in [0, 1], got {depth}")));
    }
    let question = crate::tokenizer::encode(QUESTION);
    let prompt_len = length
        .checked_sub(NIAH_ANSWER_LEN)
        .ok_or_else(|| Error::input("length cannot fit the answer"))?;
    let haystack_len = prompt_len.checked_sub(question.len()).ok_or_else(|| {
        Error::input(format!(
            "length {length} cannot fit the {}-token question",
            question.len()
        ))
    })?;

    let value: u32 = rng.random_range(100_000..1_000_000);
    let needle = crate::tokenizer::encode(&format!("The secret passkey is {value}. "));
    if haystack_len < needle.len() {
        return Err(Error::input(format!(
            "length {length} leaves a {haystack_len}-token haystack, shorter than the needle"
        )));
    }

    let mut haystack = Vec::with_capacity(haystack_len);
    while haystack.len() < haystack_len {
        let pick = FILLERS[rng.random_range(0..FILLERS.len())];
        haystack.extend(crate::tokenizer::encode(pick));
    }
    haystack.truncate(haystack_len);

    let needle_pos = (depth * (haystack_len - needle.len()) as f64).floor() as usize;
    haystack[needle_pos..needle_pos + needle.len()].copy_from_slice(&needle);

    let mut prompt = haystack;
    prompt.extend(question);
    let answer = crate::tokenizer::encode(&value.to_string());
    debug_assert_eq!(answer.len(), NIAH_ANSWER_LEN);
    debug_assert_eq!(prompt.len() + answer.len(), length);
    Ok(NiahInstance { prompt, answer, needle_pos })
}

/// Anything that can continue a prompt by `gen_len` tokens. The model is the
/// real implementation; tests substitute oracles.
pub trait TokenGenerator: Sync {
    /// Returns the full sequence: prompt followed by `gen_len` new tokens.
    fn generate(&self, prompt: &[u32], gen_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>>;
}

/// [`TokenGenerator`] backed by the denoising model.
pub struct ModelGenerator<'a, T: Real> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Parameters<T>,
    pub table: &'a RotaryTable<T>,
    pub block_size: usize,
    pub steps: usize,
    pub policy: RemaskPolicy,
}

impl<T: Real> TokenGenerator for ModelGenerator<'_, T> {
    fn generate(&self, prompt: &[u32], gen_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
        denoise_generate(
            self.cfg,
            self.params,
            self.table,
            prompt,
            gen_len,
            self.block_size,
            self.steps,
            self.policy,
            rng,
        )
    }
}

/// Retrieval accuracy over a (length × depth) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// `accuracy[i][j]` is for `lengths[i]` at `depths[j]`.
    pub accuracy: Vec<Vec<f64>>,
    pub trials: usize,
    pub seed: u64,
}

impl NiahGrid {
    /// Mean accuracy across the whole grid.
    pub fn mean_accuracy(&self) -> f64 {
        let cells: usize = self.accuracy.iter().map(|r| r.len()).sum();
        let sum: f64 = self.accuracy.iter().flatten().sum();
        sum / cells as f64
    }
}

/// Run `trials` probes per (length, depth) cell and score by exact match of
/// the generated answer span.
///
/// Cells and trials evaluate independently (in parallel when a pool is
/// available) with per-trial derived RNGs, then reduce in grid order:
/// results are bitwise identical for any thread count.
pub fn eval_niah<G: TokenGenerator>(
    generator: &G,
    lengths: &[usize],
    depths: &[f64],
    trials: usize,
    seed: u64,
) -> Result<NiahGrid> {
    check_lengths(lengths)?;
    if depths.is_empty() {
        return Err(Error::input("need at least one depth"));
    }
    if depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("depths must be strictly increasing"));
    }
    if depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(Error::input("depths must lie in [0, 1]"));
    }
    if trials == 0 {
        return Err(Error::input("need at least one trial"));
    }
    let mut cells: Vec<(usize, f64, u64)> = Vec::new();
    for &len in lengths {
        for &depth in depths {
            for trial in 0..trials as u64 {
                cells.push((len, depth, trial));
            }
        }
    }
    let outcomes: Vec<Result<bool>> = cells
        .par_iter()
        .map(|&(len, depth, trial)| {
            let mut inst_rng = rng_for(&[seed, stream::NIAH, len as u64, depth.to_bits(), trial]);
            let inst = gen_niah(len, depth, &mut inst_rng)?;
            let mut gen_rng =
                rng_for(&[seed, stream::DECODE, len as u64, depth.to_bits(), trial]);
            let out = generator.generate(&inst.prompt, NIAH_ANSWER_LEN, &mut gen_rng)?;
            if out.len() != inst.prompt.len() + NIAH_ANSWER_LEN {
                return Err(Error::input(format!(
                    "generator returned {} tokens for a {}-token request",
                    out.len(),
                    inst.prompt.len() + NIAH_ANSWER_LEN
                )));
            }
            Ok(out[inst.prompt.len()..] == inst.answer[..])
        })
        .collect();
    let mut accuracy = vec![vec![0.0f64; depths.len()]; lengths.len()];
    for (idx, outcome) in outcomes.into_iter().enumerate() {
        if outcome? {
            let cell = idx / trials;
            let (li, di) = (cell / depths.len(), cell % depths.len());
            accuracy[li][di] += 1.0;
        }
    }
    for row in &mut accuracy {
        for a in row {
            *a /= trials as f64;
        }
    }
    Ok(NiahGrid {
        lengths: lengths.to_vec(),
        depths: depths.to_vec(),
        accuracy,
        trials,
        seed,
    })
}

/// Heatmap CSV: header row of depths, then one row per length with
/// accuracies, all at six significant digits.
pub fn niah_csv(grid: &NiahGrid) -> String {
    let mut out = String::from("length");
    for &d in &grid.depths {
        out.push(',');
        out.push_str(&fmt_sig(d, 6));
    }
    out.push('\n');
    for (i, &len) in grid.lengths.iter().enumerate() {
        out.push_str(&len.to_string());
        for &a in &grid.accuracy[i] {
            out.push(',');
            out.push_str(&fmt_sig(a, 6));
        }
        out.push('\n');
    }
    out
}
