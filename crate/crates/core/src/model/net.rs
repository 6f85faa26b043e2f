//! Denoiser network: pre-norm bidirectional transformer with rotary attention,
//! masked reconstruction loss, and a hand-written backward pass.
//!
//! Attention never materializes disallowed (i, j) pairs: every mask shape
//! yields one contiguous allowed column range per row, and score rows are
//! stored at exactly that width. This is equivalent to setting disallowed
//! scores to negative infinity before the softmax, but makes cross-segment
//! independence exact rather than approximate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{matmul, matmul_acc, matmul_at_b_acc, transpose, Real};
use crate::packing::{build_mask, AttentionMask, MaskSpec};
use crate::rope::RotaryTable;

use super::{ModelConfig, NoisySample, Parameters};

/// Epsilon inside the root-mean-square normalizer.
pub const RMS_EPS: f64 = 1e-5;

/// How masked-position losses are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// Plain mean over masked positions (the default).
    #[default]
    Uniform,
    /// Mean scaled by `1/t`, the importance weight of the masked-diffusion
    /// ELBO literature; kept for comparison runs.
    InverseNoise,
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(u: T) -> T {
    let a = T::from_f64(GELU_A);
    let b = T::from_f64(GELU_B);
    let half = T::from_f64(0.5);
    let z = a * (u + b * u * u * u);
    half * u * (T::one() + z.tanh())
}

#[inline]
fn gelu_grad<T: Real>(u: T) -> T {
    let a = T::from_f64(GELU_A);
    let b = T::from_f64(GELU_B);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let z = a * (u + b * u * u * u);
    let th = z.tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * a * (T::one() + three * b * u * u)
}

fn rmsnorm_forward<T: Real>(x: &[T], gain: &[T], l: usize, d: usize, out: &mut [T], inv: &mut [T]) {
    let eps = T::from_f64(RMS_EPS);
    let dn = T::from_f64(d as f64);
    for i in 0..l {
        let row = &x[i * d..(i + 1) * d];
        let mut ms = T::zero();
        for &v in row {
            ms = ms + v * v;
        }
        let r = T::one() / (ms / dn + eps).sqrt();
        inv[i] = r;
        let orow = &mut out[i * d..(i + 1) * d];
        for c in 0..d {
            orow[c] = row[c] * r * gain[c];
        }
    }
}

/// Accumulates into `dx` and `dgain`.
fn rmsnorm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    inv: &[T],
    dy: &[T],
    l: usize,
    d: usize,
    dgain: &mut [T],
    dx: &mut [T],
) {
    let dn = T::from_f64(d as f64);
    for i in 0..l {
        let r = inv[i];
        let r3 = r * r * r;
        let xrow = &x[i * d..(i + 1) * d];
        let dyrow = &dy[i * d..(i + 1) * d];
        let mut dot = T::zero();
        for c in 0..d {
            dot = dot + dyrow[c] * gain[c] * xrow[c];
        }
        let factor = r3 * dot / dn;
        let dxrow = &mut dx[i * d..(i + 1) * d];
        for c in 0..d {
            dxrow[c] = dxrow[c] + r * dyrow[c] * gain[c] - xrow[c] * factor;
            dgain[c] = dgain[c] + dyrow[c] * xrow[c] * r;
        }
    }
}

/// Per-layer activation cache kept for the backward pass.
struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    n1: Vec<T>,
    q: Vec<T>, // post-rotation
    k: Vec<T>, // post-rotation
    v: Vec<T>,
    /// Attention probabilities, per head, rows stored at mask width.
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    n2: Vec<T>,
    u: Vec<T>,
}

struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    final_x: Vec<T>,
    /// Prefix sums of mask row widths; row i of a score matrix lives at
    /// `offsets[i]..offsets[i+1]`.
    offsets: Vec<usize>,
}

fn validate_forward<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    tokens: &[u32],
    mask: &AttentionMask,
) -> Result<()> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::input("forward on an empty sequence"));
    }
    if tokens.len() > table.max_position {
        return Err(Error::input(format!(
            "sequence length {} exceeds the rotary table's {} positions",
            tokens.len(),
            table.max_position
        )));
    }
    if table.head_dim != cfg.head_dim {
        return Err(Error::config(format!(
            "rotary table head_dim {} does not match model head_dim {}",
            table.head_dim, cfg.head_dim
        )));
    }
    if mask.len() != tokens.len() {
        return Err(Error::input(format!(
            "mask length {} does not match sequence length {}",
            mask.len(),
            tokens.len()
        )));
    }
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= cfg.vocab_size {
            return Err(Error::input(format!(
                "token {t} at position {i} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    if !params.all_finite() {
        return Err(Error::input("parameters contain non-finite values"));
    }
    Ok(())
}

fn run_forward<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    tokens: &[u32],
    mask: &AttentionMask,
    want_cache: bool,
) -> Result<(Vec<T>, Option<Cache<T>>)> {
    validate_forward(cfg, params, table, tokens, mask)?;
    let l = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let nh = cfg.n_heads;
    let hidden = cfg.ffn_hidden();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut offsets = Vec::with_capacity(l + 1);
    let mut total = 0usize;
    for i in 0..l {
        offsets.push(total);
        let (s, e) = mask.row_range(i);
        total += e - s;
    }
    offsets.push(total);

    let mut x = vec![T::zero(); l * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let trow = tok as usize * d;
        x[i * d..(i + 1) * d].copy_from_slice(&params.embed[trow..trow + d]);
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let mut n1 = vec![T::zero(); l * d];
        let mut inv1 = vec![T::zero(); l];
        rmsnorm_forward(&x, &layer.attn_norm_g, l, d, &mut n1, &mut inv1);
        let mut q = matmul(&n1, &layer.wq, l, d, d);
        let mut k = matmul(&n1, &layer.wk, l, d, d);
        let v = matmul(&n1, &layer.wv, l, d, d);
        for p in 0..l {
            for h in 0..nh {
                table.apply(&mut q[p * d + h * hd..p * d + (h + 1) * hd], p);
                table.apply(&mut k[p * d + h * hd..p * d + (h + 1) * hd], p);
            }
        }

        // Score rows live in a reusable scratch buffer; they are copied into
        // the persistent cache only when a backward pass will need them.
        let mut probs = if want_cache { vec![T::zero(); nh * total] } else { Vec::new() };
        let mut att = vec![T::zero(); l * d];
        let mut kt = vec![T::zero(); hd * l];
        let mut row: Vec<T> = Vec::new();
        for h in 0..nh {
            let base = h * hd;
            for j in 0..l {
                for c in 0..hd {
                    kt[c * l + j] = k[j * d + base + c];
                }
            }
            for i in 0..l {
                let (s, e) = mask.row_range(i);
                let w = e - s;
                row.clear();
                row.resize(w, T::zero());
                for c in 0..hd {
                    let qs = q[i * d + base + c] * scale;
                    let ktc = &kt[c * l + s..c * l + e];
                    for (rj, kv) in row.iter_mut().zip(ktc) {
                        *rj = *rj + qs * *kv;
                    }
                }
                let mut m = row[0];
                for &val in row.iter().skip(1) {
                    if val > m {
                        m = val;
                    }
                }
                let mut sum = T::zero();
                for rj in row.iter_mut() {
                    let ex = (*rj - m).exp();
                    *rj = ex;
                    sum = sum + ex;
                }
                let isum = T::one() / sum;
                for rj in row.iter_mut() {
                    *rj = *rj * isum;
                }
                if want_cache {
                    probs[h * total + offsets[i]..h * total + offsets[i] + w]
                        .copy_from_slice(&row);
                }
                let att_row = &mut att[i * d + base..i * d + base + hd];
                for (off_j, &p) in row.iter().enumerate() {
                    let j = s + off_j;
                    let vrow = &v[j * d + base..j * d + base + hd];
                    for c in 0..hd {
                        att_row[c] = att_row[c] + p * vrow[c];
                    }
                }
            }
        }

        let proj = matmul(&att, &layer.wo, l, d, d);
        let x_mid: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

        let mut n2 = vec![T::zero(); l * d];
        let mut inv2 = vec![T::zero(); l];
        rmsnorm_forward(&x_mid, &layer.ffn_norm_g, l, d, &mut n2, &mut inv2);
        let u = matmul(&n2, &layer.w_up, l, d, hidden);
        let g: Vec<T> = u.iter().map(|&uu| gelu(uu)).collect();
        let down = matmul(&g, &layer.w_down, l, hidden, d);
        let x_out: Vec<T> = x_mid.iter().zip(&down).map(|(&a, &b)| a + b).collect();

        // `g` is recomputable from `u`, so it is not cached.
        drop(g);
        if want_cache {
            layer_caches.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                inv1,
                n1,
                q,
                k,
                v,
                probs,
                att,
                x_mid,
                inv2,
                n2,
                u,
            });
        } else {
            x = x_out;
        }
    }

    let logits = matmul(&x, &params.head, l, d, cfg.vocab_size);
    let cache = want_cache.then(|| Cache { layers: layer_caches, final_x: x, offsets });
    Ok((logits, cache))
}

/// Run the denoiser over `tokens` with a prebuilt attention mask and return
/// the (L × vocab) logits, row-major.
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    tokens: &[u32],
    mask: &AttentionMask,
) -> Result<Vec<T>> {
    run_forward(cfg, params, table, tokens, mask, false).map(|(logits, _)| logits)
}

/// [`forward`] with the mask built from its declarative shape.
pub fn forward_logits<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    tokens: &[u32],
    spec: &MaskSpec,
) -> Result<Vec<T>> {
    let mask = build_mask(spec, tokens.len())?;
    forward(cfg, params, table, tokens, &mask)
}

/// Mean negative log-likelihood of the clean tokens at masked positions;
/// zero when nothing is masked. Log-sum-exp runs in double precision
/// regardless of the model's working precision.
pub fn masked_nll<T: Real>(
    logits: &[T],
    vocab: usize,
    sample: &NoisySample,
    weighting: LossWeighting,
) -> Result<f64> {
    let l = sample.x0.len();
    if sample.x_t.len() != l {
        return Err(Error::input("corrupted/clean length mismatch"));
    }
    if logits.len() != l * vocab {
        return Err(Error::input(format!(
            "logits length {} does not match {l} positions x {vocab} vocab",
            logits.len()
        )));
    }
    if sample.masked.is_empty() {
        return Ok(0.0);
    }
    let weight = match weighting {
        LossWeighting::Uniform => 1.0,
        LossWeighting::InverseNoise => {
            if sample.t <= 0.0 {
                return Err(Error::input(
                    "inverse-noise weighting undefined at t = 0 with masked positions",
                ));
            }
            1.0 / sample.t
        }
    };
    let mut sum = 0.0f64;
    for &i in &sample.masked {
        if i >= l || sample.x0[i] as usize >= vocab {
            return Err(Error::input(format!("masked index {i} out of range")));
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            m = m.max(v.to_f64());
        }
        let mut exp_sum = 0.0f64;
        for &v in row {
            exp_sum += (v.to_f64() - m).exp();
        }
        let lse = m + exp_sum.ln();
        sum += weight * (lse - row[sample.x0[i] as usize].to_f64());
    }
    Ok(sum / sample.masked.len() as f64)
}

fn backward<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    tokens: &[u32],
    mask: &AttentionMask,
    cache: &Cache<T>,
    dlogits_masked: &[T],
    masked: &[usize],
) -> Result<Parameters<T>> {
    let mut grads = Parameters::zeros(cfg)?;
    let l = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let nh = cfg.n_heads;
    let hidden = cfg.ffn_hidden();
    let kv = cfg.vocab_size;
    let offsets = &cache.offsets;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let m_cnt = masked.len();

    // Head: only masked rows carry loss gradient, so work on the compacted
    // (m_cnt × vocab) matrix and scatter back.
    let mut d_x = vec![T::zero(); l * d];
    let mut xm = vec![T::zero(); m_cnt * d];
    for (r, &i) in masked.iter().enumerate() {
        xm[r * d..(r + 1) * d].copy_from_slice(&cache.final_x[i * d..(i + 1) * d]);
    }
    matmul_at_b_acc(&mut grads.head, &xm, dlogits_masked, m_cnt, d, kv);
    let head_t = transpose(&params.head, d, kv);
    let dxm = matmul(dlogits_masked, &head_t, m_cnt, kv, d);
    for (r, &i) in masked.iter().enumerate() {
        d_x[i * d..(i + 1) * d].copy_from_slice(&dxm[r * d..(r + 1) * d]);
    }

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // Feed-forward.
        let w_down_t = transpose(&layer.w_down, hidden, d);
        let g: Vec<T> = lc.u.iter().map(|&uu| gelu(uu)).collect();
        matmul_at_b_acc(&mut gl.w_down, &g, &d_x, l, hidden, d);
        let mut du = matmul(&d_x, &w_down_t, l, d, hidden);
        for (duv, &uu) in du.iter_mut().zip(&lc.u) {
            *duv = *duv * gelu_grad(uu);
        }
        matmul_at_b_acc(&mut gl.w_up, &lc.n2, &du, l, d, hidden);
        let w_up_t = transpose(&layer.w_up, d, hidden);
        let dn2 = matmul(&du, &w_up_t, l, hidden, d);
        let mut dx_mid = d_x; // residual path flows through unchanged
        rmsnorm_backward(
            &lc.x_mid,
            &layer.ffn_norm_g,
            &lc.inv2,
            &dn2,
            l,
            d,
            &mut gl.ffn_norm_g,
            &mut dx_mid,
        );

        // Attention output projection.
        matmul_at_b_acc(&mut gl.wo, &lc.att, &dx_mid, l, d, d);
        let wo_t = transpose(&layer.wo, d, d);
        let datt = matmul(&dx_mid, &wo_t, l, d, d);

        let total = offsets[l];
        let mut dq = vec![T::zero(); l * d];
        let mut dk = vec![T::zero(); l * d];
        let mut dv = vec![T::zero(); l * d];
        let mut vt = vec![T::zero(); hd * l];
        let mut ds_row: Vec<T> = Vec::new();
        for h in 0..nh {
            let base = h * hd;
            for j in 0..l {
                for c in 0..hd {
                    vt[c * l + j] = lc.v[j * d + base + c];
                }
            }
            let probs_h = &lc.probs[h * total..(h + 1) * total];
            for i in 0..l {
                let (s, e) = mask.row_range(i);
                let w = e - s;
                ds_row.clear();
                ds_row.resize(w, T::zero());
                // dP = datt_row · Vᵀ
                for c in 0..hd {
                    let a = datt[i * d + base + c];
                    let vtc = &vt[c * l + s..c * l + e];
                    for (dsj, vv) in ds_row.iter_mut().zip(vtc) {
                        *dsj = *dsj + a * *vv;
                    }
                }
                // Softmax backward, folding in the 1/sqrt(hd) score scale.
                let p_row = &probs_h[offsets[i]..offsets[i] + w];
                let mut dot = T::zero();
                for (&p, &dp) in p_row.iter().zip(ds_row.iter()) {
                    dot = dot + p * dp;
                }
                for (dsj, &p) in ds_row.iter_mut().zip(p_row) {
                    *dsj = (*dsj - dot) * p * scale;
                }
                let qrow = &lc.q[i * d + base..i * d + base + hd];
                let datt_row = &datt[i * d + base..i * d + base + hd];
                let dq_row = &mut dq[i * d + base..i * d + base + hd];
                for (off_j, (&dsv, &p)) in ds_row.iter().zip(p_row).enumerate() {
                    let j = s + off_j;
                    let krow = &lc.k[j * d + base..j * d + base + hd];
                    let dk_row = &mut dk[j * d + base..j * d + base + hd];
                    let dv_row = &mut dv[j * d + base..j * d + base + hd];
                    for c in 0..hd {
                        dq_row[c] = dq_row[c] + dsv * krow[c];
                        dk_row[c] = dk_row[c] + dsv * qrow[c];
                        dv_row[c] = dv_row[c] + p * datt_row[c];
                    }
                }
            }
        }
        // Rotation is orthogonal: its Jacobian is the inverse rotation.
        for p in 0..l {
            for h in 0..nh {
                table.apply_inverse(&mut dq[p * d + h * hd..p * d + (h + 1) * hd], p);
                table.apply_inverse(&mut dk[p * d + h * hd..p * d + (h + 1) * hd], p);
            }
        }
        matmul_at_b_acc(&mut gl.wq, &lc.n1, &dq, l, d, d);
        matmul_at_b_acc(&mut gl.wk, &lc.n1, &dk, l, d, d);
        matmul_at_b_acc(&mut gl.wv, &lc.n1, &dv, l, d, d);
        let wq_t = transpose(&layer.wq, d, d);
        let mut dn1 = matmul(&dq, &wq_t, l, d, d);
        let wk_t = transpose(&layer.wk, d, d);
        matmul_acc(&mut dn1, &dk, &wk_t, l, d, d);
        let wv_t = transpose(&layer.wv, d, d);
        matmul_acc(&mut dn1, &dv, &wv_t, l, d, d);
        rmsnorm_backward(
            &lc.x_in,
            &layer.attn_norm_g,
            &lc.inv1,
            &dn1,
            l,
            d,
            &mut gl.attn_norm_g,
            &mut dx_mid,
        );
        d_x = dx_mid;
    }

    for (i, &tok) in tokens.iter().enumerate() {
        let row = &mut grads.embed[tok as usize * d..(tok as usize + 1) * d];
        for c in 0..d {
            row[c] = row[c] + d_x[i * d + c];
        }
    }
    Ok(grads)
}

/// Loss and full parameter gradients for one corrupted sample.
pub fn loss_and_grad<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    sample: &NoisySample,
    spec: &MaskSpec,
    weighting: LossWeighting,
) -> Result<(f64, Parameters<T>)> {
    let mask = build_mask(spec, sample.x_t.len())?;
    let (logits, cache) = run_forward(cfg, params, table, &sample.x_t, &mask, true)?;
    let cache = cache.expect("cache requested");
    let loss = masked_nll(&logits, cfg.vocab_size, sample, weighting)?;
    if sample.masked.is_empty() {
        return Ok((0.0, Parameters::zeros(cfg)?));
    }
    let kv = cfg.vocab_size;
    let m_cnt = sample.masked.len();
    let weight = match weighting {
        LossWeighting::Uniform => 1.0,
        LossWeighting::InverseNoise => 1.0 / sample.t,
    };
    let coef = T::from_f64(weight / m_cnt as f64);
    // d(loss)/d(logits) = (softmax - onehot) * coef at masked rows, zero
    // elsewhere; kept compact over masked rows only.
    let mut dlog = vec![T::zero(); m_cnt * kv];
    for (r, &i) in sample.masked.iter().enumerate() {
        let row = &logits[i * kv..(i + 1) * kv];
        let drow = &mut dlog[r * kv..(r + 1) * kv];
        let mut m = row[0];
        for &v in row.iter().skip(1) {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for (dv, &v) in drow.iter_mut().zip(row) {
            let ex = (v - m).exp();
            *dv = ex;
            sum = sum + ex;
        }
        let norm = coef / sum;
        for dv in drow.iter_mut() {
            *dv = *dv * norm;
        }
        drow[sample.x0[i] as usize] = drow[sample.x0[i] as usize] - coef;
    }
    let grads = backward(
        cfg,
        params,
        table,
        &sample.x_t,
        &mask,
        &cache,
        &dlog,
        &sample.masked,
    )?;
    Ok((loss, grads))
}

/// Mean loss and gradients over a batch.
///
/// Samples are evaluated independently (in parallel when a thread pool is
/// available) and reduced in batch order, so results are bitwise identical
/// for any thread count.
pub fn batch_loss_and_grad<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    batch: &[(NoisySample, MaskSpec)],
    weighting: LossWeighting,
) -> Result<(f64, Parameters<T>)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let per_sample: Vec<Result<(f64, Parameters<T>)>> = batch
        .par_iter()
        .map(|(sample, spec)| loss_and_grad(cfg, params, table, sample, spec, weighting))
        .collect();
    let inv_n = T::from_f64(1.0 / batch.len() as f64);
    let mut total = Parameters::zeros(cfg)?;
    let mut loss_sum = 0.0f64;
    for r in per_sample {
        let (loss, g) = r?;
        loss_sum += loss;
        total.add_scaled(&g, inv_n);
    }
    Ok((loss_sum / batch.len() as f64, total))
}

/// Compare analytic gradients against central finite differences and return
/// the worst relative error seen.
///
/// For every parameter tensor, probes the `coords_per_tensor` coordinates
/// with the largest analytic gradient plus an evenly strided sample of the
/// rest (so both live and dead coordinates are exercised). The relative
/// error denominator is floored at 1e-6: against an O(1) loss, differencing
/// cannot resolve gradients much below that — the quotient of two ~1e-13
/// rounding residues is noise, not signal. A verification utility — run it
/// with `T = f64`; at f32 the differencing noise swamps everything.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_max_rel_err<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    table: &RotaryTable<T>,
    sample: &NoisySample,
    spec: &MaskSpec,
    weighting: LossWeighting,
    coords_per_tensor: usize,
    step_h: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_grad(cfg, params, table, sample, spec, weighting)?;
    let mask = build_mask(spec, sample.x_t.len())?;
    let loss_of = |p: &Parameters<T>| -> Result<f64> {
        let logits = forward(cfg, p, table, &sample.x_t, &mask)?;
        masked_nll(&logits, cfg.vocab_size, sample, weighting)
    };
    let h = T::from_f64(step_h);
    let mut worst = 0.0f64;
    let n_tensors = grads.tensors().len();
    for ti in 0..n_tensors {
        let g: Vec<f64> = grads.tensors()[ti].1.iter().map(|&v| v.to_f64()).collect();
        let len = g.len();
        let mut coords = std::collections::BTreeSet::new();
        if len <= coords_per_tensor {
            coords.extend(0..len);
        } else {
            let top = coords_per_tensor.div_ceil(2);
            let mut by_mag: Vec<usize> = (0..len).collect();
            by_mag.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            coords.extend(by_mag.into_iter().take(top));
            let spread = coords_per_tensor - top;
            for j in 0..spread {
                coords.insert(j * len / spread.max(1));
            }
        }
        for &ci in &coords {
            let base = params.tensors()[ti].1[ci];
            let mut probe = params.clone();
            probe.tensors_mut()[ti].1[ci] = base + h;
            let lp = loss_of(&probe)?;
            probe.tensors_mut()[ti].1[ci] = base - h;
            let lm = loss_of(&probe)?;
            let fd = (lp - lm) / (2.0 * step_h);
            let ga = g[ci];
            let rel = (fd - ga).abs() / fd.abs().max(ga.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
