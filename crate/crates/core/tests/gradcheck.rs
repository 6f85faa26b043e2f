//! Finite-difference validation of the hand-written backward pass.
//!
//! Runs a small double-precision model so central differences are accurate
//! to ~1e-8, then demands the analytic gradients agree to 1e-4 for every
//! parameter tensor under every attention-permission shape.

use longwave::math::rng_for;
use longwave::model::{
    corrupt, grad_check_max_rel_err, LossWeighting, ModelConfig, Parameters,
};
use longwave::packing::MaskSpec;
use longwave::rope::RotaryTable;

const SEQ_LEN: usize = 16;
const COORDS: usize = 10;
const FD_H: f64 = 1e-4;

fn setup() -> (ModelConfig, Parameters<f64>, RotaryTable<f64>) {
    let cfg = ModelConfig::byte_level(32, 2, 2, SEQ_LEN, 10_000.0);
    let params = Parameters::init(&cfg, 21).unwrap();
    let table = RotaryTable::for_config(&cfg.rope, cfg.max_positions).unwrap();
    (cfg, params, table)
}

fn sample_for(seed: u64) -> longwave::model::NoisySample {
    let x0: Vec<u32> = (0..SEQ_LEN as u32).map(|i| (i * 31 + 7) % 251).collect();
    let mut rng = rng_for(&[seed]);
    let s = corrupt(&x0, 0.45, &mut rng).unwrap();
    assert!(
        !s.masked.is_empty() && s.masked.len() < SEQ_LEN,
        "want a partial masking for a meaningful check"
    );
    s
}

#[test]
fn gradients_match_finite_differences_full_mask() {
    let (cfg, params, table) = setup();
    let s = sample_for(1);
    let worst = grad_check_max_rel_err(
        &cfg,
        &params,
        &table,
        &s,
        &MaskSpec::FullBidirectional,
        LossWeighting::Uniform,
        COORDS,
        FD_H,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn gradients_match_finite_differences_causal_mask() {
    let (cfg, params, table) = setup();
    let s = sample_for(2);
    let worst = grad_check_max_rel_err(
        &cfg,
        &params,
        &table,
        &s,
        &MaskSpec::Causal,
        LossWeighting::Uniform,
        COORDS,
        FD_H,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn gradients_match_finite_differences_segment_mask() {
    let (cfg, params, table) = setup();
    let s = sample_for(3);
    let ids = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2];
    let worst = grad_check_max_rel_err(
        &cfg,
        &params,
        &table,
        &s,
        &MaskSpec::SegmentBlockDiagonal(ids),
        LossWeighting::Uniform,
        COORDS,
        FD_H,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn gradients_match_finite_differences_inverse_noise_weighting() {
    let (cfg, params, table) = setup();
    let s = sample_for(4);
    let worst = grad_check_max_rel_err(
        &cfg,
        &params,
        &table,
        &s,
        &MaskSpec::FullBidirectional,
        LossWeighting::InverseNoise,
        COORDS,
        FD_H,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}
