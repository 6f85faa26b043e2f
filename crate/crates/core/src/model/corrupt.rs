//! Forward corruption process: independently replace each token with the mask
//! id with probability `t`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::MASK_ID;

/// One corrupted training/eval sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x0: Vec<u32>,
    pub x_t: Vec<u32>,
    /// Masking probability this sample was drawn at.
    pub t: f64,
    /// Sorted indices where `x_t` is the mask id.
    pub masked: Vec<usize>,
}

/// Mask each position of `x0` independently with probability `t`.
pub fn corrupt(x0: &[u32], t: f64, rng: &mut ChaCha8Rng) -> Result<NoisySample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!(
            "noise level t must lie in [0, 1], got {t}"
        )));
    }
    if x0.is_empty() {
        return Err(Error::input("cannot corrupt an empty sequence"));
    }
    if x0.contains(&MASK_ID) {
        return Err(Error::input("clean sequence already contains the mask id"));
    }
    let mut x_t = x0.to_vec();
    let mut masked = Vec::new();
    for (i, slot) in x_t.iter_mut().enumerate() {
        if rng.random::<f64>() < t {
            *slot = MASK_ID;
            masked.push(i);
        }
    }
    Ok(NoisySample { x0: x0.to_vec(), x_t, t, masked })
}
