//! Rotary position embeddings and NTK-style frequency rescaling for context
//! extension, including a variant that accounts for the doubled effective
//! attention span of bidirectional (diffusion) models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{fmt_sig, Real};

pub const TAU: f64 = std::f64::consts::TAU;

/// Frequency-scaling rule applied when the target context exceeds the trained
/// context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NtkMode {
    /// Uniform base multiplier `s^(d/(d-2))` from the context ratio alone.
    Vanilla,
    /// Base chosen so the slowest pair that completes a period within the
    /// trained span reaches a full period at the target span. Treats the
    /// usable span as the raw context length (the causal-model convention).
    Baseline,
    /// Same construction, but spans are doubled: a bidirectional model sees
    /// relative offsets in `(-T, T)`, so a pair must complete its period over
    /// `2T` to be fully exercised.
    Diffusion,
}

impl NtkMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NtkMode::Vanilla => "vanilla",
            NtkMode::Baseline => "baseline",
            NtkMode::Diffusion => "diffusion",
        }
    }
}

impl std::fmt::Display for NtkMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NtkMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(NtkMode::Vanilla),
            "baseline" => Ok(NtkMode::Baseline),
            "diffusion" => Ok(NtkMode::Diffusion),
            other => Err(Error::config(format!(
                "unknown scaling mode {other:?} (expected vanilla, baseline, or diffusion)"
            ))),
        }
    }
}

/// Rotary-embedding configuration carried inside every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    /// Rotary base `b`; inverse frequencies are `b^(-2i/d)`.
    pub base: f64,
    /// Per-head dimension `d`; must be even, rotations act on pairs.
    pub head_dim: usize,
    /// Context length the weights were (pre-)trained at.
    pub train_context: usize,
    /// Context length the scaled table should support.
    pub target_context: usize,
    pub mode: NtkMode,
}

impl RopeConfig {
    /// Config for a freshly initialized model: no extension, scaling is the
    /// identity (`lambda = 1`).
    pub fn identity(base: f64, head_dim: usize, context: usize) -> Self {
        RopeConfig {
            base,
            head_dim,
            train_context: context,
            target_context: context,
            mode: NtkMode::Vanilla,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::config(format!(
                "rotary base must be a finite number > 1, got {}",
                self.base
            )));
        }
        if self.head_dim < 2 || self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim must be even and >= 2, got {}",
                self.head_dim
            )));
        }
        if self.train_context == 0 {
            return Err(Error::config("train_context must be positive"));
        }
        if self.target_context < self.train_context {
            return Err(Error::config(format!(
                "target_context {} is smaller than train_context {}",
                self.target_context, self.train_context
            )));
        }
        Ok(())
    }
}

/// Everything `scaling_factor` derives from a [`RopeConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub mode: NtkMode,
    /// Base multiplier; the scaled table uses `effective_base = lambda * base`.
    pub lambda: f64,
    /// Lowest rotary dimension whose pair completes a full period within the
    /// trained span (after clamping to `[2, head_dim]`).
    pub critical_dim: usize,
    /// True when the raw critical dimension fell outside `[2, head_dim]`.
    pub critical_dim_clamped: bool,
    pub effective_base: f64,
    /// Span treated as fully exercised during training (doubled in diffusion
    /// mode).
    pub span_trained: usize,
    /// Span the scaled table must cover (doubled in diffusion mode).
    pub span_required: usize,
    /// `target_context / train_context`.
    pub scale_ratio: f64,
    /// Per-pair rotation periods under `effective_base`.
    pub periods: Vec<f64>,
}

/// Inverse frequencies `base^(-2i/d)` for pairs `i = 0 .. d/2`.
pub fn inv_frequencies(base: f64, head_dim: usize) -> Result<Vec<f64>> {
    validate_base_dim(base, head_dim)?;
    let d = head_dim as f64;
    Ok((0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d))
        .collect())
}

/// Rotation period `2π * base^(2i/d)` of pair `i`.
pub fn pair_period(base: f64, head_dim: usize, pair: usize) -> f64 {
    TAU * base.powf(2.0 * pair as f64 / head_dim as f64)
}

fn validate_base_dim(base: f64, head_dim: usize) -> Result<()> {
    if !(base.is_finite() && base > 1.0) {
        return Err(Error::config(format!(
            "rotary base must be a finite number > 1, got {base}"
        )));
    }
    if head_dim < 2 || head_dim % 2 != 0 {
        return Err(Error::config(format!(
            "head_dim must be even and >= 2, got {head_dim}"
        )));
    }
    Ok(())
}

/// Lowest even dimension index whose rotary pair completes a full period
/// within `span` positions, clamped to `[2, head_dim]`.
///
/// Rejects spans of `ceil(2π)` positions or fewer: below that not even the
/// fastest pair (period `2π`) completes a period, and the construction is
/// meaningless.
pub fn critical_dimension(base: f64, head_dim: usize, span: usize) -> Result<usize> {
    critical_dimension_detail(base, head_dim, span).map(|(dim, _)| dim)
}

fn critical_dimension_detail(base: f64, head_dim: usize, span: usize) -> Result<(usize, bool)> {
    validate_base_dim(base, head_dim)?;
    if (span as f64) <= TAU.ceil() {
        return Err(Error::config(format!(
            "span {span} too short: no rotary pair completes a period in <= ceil(2*pi) positions"
        )));
    }
    let d = head_dim as f64;
    let raw = 2.0 * ((d / 2.0) * (span as f64 / TAU).ln() / base.ln()).ceil();
    let clamped = raw < 2.0 || raw > d;
    let dim = raw.max(2.0).min(d) as usize;
    Ok((dim, clamped))
}

/// Derive the base multiplier `lambda` and associated diagnostics for a
/// scaling configuration.
pub fn scaling_factor(cfg: &RopeConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let d = cfg.head_dim as f64;
    let scale_ratio = cfg.target_context as f64 / cfg.train_context as f64;

    let (lambda, critical_dim, critical_dim_clamped, span_trained, span_required) = match cfg.mode {
        NtkMode::Vanilla => {
            if cfg.head_dim == 2 {
                return Err(Error::config(
                    "vanilla scaling exponent d/(d-2) is undefined for head_dim 2; \
                     use baseline or diffusion mode",
                ));
            }
            let lambda = scale_ratio.powf(d / (d - 2.0));
            (lambda, cfg.head_dim, false, cfg.train_context, cfg.target_context)
        }
        NtkMode::Baseline | NtkMode::Diffusion => {
            // Bidirectional attention sees relative offsets in (-T, T): a pair
            // is only fully exercised once its period fits in 2T.
            let factor = if cfg.mode == NtkMode::Diffusion { 2 } else { 1 };
            let span_trained = factor * cfg.train_context;
            let span_required = factor * cfg.target_context;
            let (crit, clamped) = critical_dimension_detail(cfg.base, cfg.head_dim, span_trained)?;
            let lambda = (span_required as f64 / TAU).powf(d / crit as f64) / cfg.base;
            (lambda, crit, clamped, span_trained, span_required)
        }
    };

    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config(format!(
            "scaling factor is not a positive finite number (lambda = {lambda}); \
             configuration out of representable range"
        )));
    }
    let effective_base = lambda * cfg.base;

    // The defining property of the base-change modes: after scaling, the pair
    // at the critical dimension completes its period exactly at the required
    // span. Pure algebra, so any visible error means a real bug.
    if matches!(cfg.mode, NtkMode::Baseline | NtkMode::Diffusion) {
        let period = pair_period(effective_base, cfg.head_dim, critical_dim / 2);
        let rel = (period - span_required as f64).abs() / span_required as f64;
        assert!(
            rel < 1e-9,
            "critical-pair period {period} does not meet required span {span_required} (rel {rel})"
        );
    }

    let periods = (0..cfg.head_dim / 2)
        .map(|i| pair_period(effective_base, cfg.head_dim, i))
        .collect();

    Ok(ScalingReport {
        mode: cfg.mode,
        lambda,
        critical_dim,
        critical_dim_clamped,
        effective_base,
        span_trained,
        span_required,
        scale_ratio,
        periods,
    })
}

/// Precomputed cos/sin tables for rotary application.
///
/// Angles are always computed in `f64` and cast to the working scalar, so a
/// table's values do not depend on the precision the model runs at beyond the
/// final rounding.
#[derive(Debug, Clone)]
pub struct RotaryTable<T: Real> {
    pub max_position: usize,
    pub head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RotaryTable<T> {
    /// Build a table directly from an (effective) base.
    pub fn new(effective_base: f64, head_dim: usize, max_position: usize) -> Result<Self> {
        validate_base_dim(effective_base, head_dim)?;
        if max_position == 0 {
            return Err(Error::config("rotary table needs at least one position"));
        }
        let half = head_dim / 2;
        let inv = inv_frequencies(effective_base, head_dim)?;
        let mut cos = vec![T::zero(); max_position * half];
        let mut sin = vec![T::zero(); max_position * half];
        for p in 0..max_position {
            for (i, f) in inv.iter().enumerate() {
                let angle = p as f64 * f;
                cos[p * half + i] = T::from_f64(angle.cos());
                sin[p * half + i] = T::from_f64(angle.sin());
            }
        }
        Ok(RotaryTable { max_position, head_dim, cos, sin })
    }

    /// Build a table for a scaling configuration, sized to `max_position`.
    pub fn for_config(cfg: &RopeConfig, max_position: usize) -> Result<Self> {
        let report = scaling_factor(cfg)?;
        Self::new(report.effective_base, cfg.head_dim, max_position)
    }

    /// Rotate adjacent pairs `(v[2i], v[2i+1])` by the angles of `position`,
    /// in place.
    #[inline]
    pub fn apply(&self, v: &mut [T], position: usize) {
        debug_assert_eq!(v.len(), self.head_dim);
        debug_assert!(position < self.max_position);
        let half = self.head_dim / 2;
        let c = &self.cos[position * half..(position + 1) * half];
        let s = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let x = v[2 * i];
            let y = v[2 * i + 1];
            v[2 * i] = x * c[i] - y * s[i];
            v[2 * i + 1] = x * s[i] + y * c[i];
        }
    }

    /// Inverse rotation (used when backpropagating through `apply`; the
    /// Jacobian of a rotation is the rotation by the opposite angle).
    #[inline]
    pub fn apply_inverse(&self, v: &mut [T], position: usize) {
        debug_assert_eq!(v.len(), self.head_dim);
        let half = self.head_dim / 2;
        let c = &self.cos[position * half..(position + 1) * half];
        let s = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let x = v[2 * i];
            let y = v[2 * i + 1];
            v[2 * i] = x * c[i] + y * s[i];
            v[2 * i + 1] = -x * s[i] + y * c[i];
        }
    }
}

/// Checked, allocating rotary application.
pub fn apply_rotary<T: Real>(table: &RotaryTable<T>, v: &[T], position: usize) -> Result<Vec<T>> {
    if v.len() != table.head_dim {
        return Err(Error::input(format!(
            "vector length {} does not match head_dim {}",
            v.len(),
            table.head_dim
        )));
    }
    if position >= table.max_position {
        return Err(Error::input(format!(
            "position {position} outside table (max_position {})",
            table.max_position
        )));
    }
    let mut out = v.to_vec();
    table.apply(&mut out, position);
    Ok(out)
}

/// Per-pair period table as CSV: one row per rotary pair, periods before and
/// after scaling, and whether the scaled period covers the required span.
pub fn report_csv(cfg: &RopeConfig, report: &ScalingReport) -> String {
    let mut out = String::from("pair_index,dimension,period_before,period_after,covers_T_Ecap\n");
    for i in 0..cfg.head_dim / 2 {
        let before = pair_period(cfg.base, cfg.head_dim, i);
        let after = report.periods[i];
        // The critical pair lands exactly on the span boundary; count it as
        // covering despite rounding in powf.
        let covers = after >= report.span_required as f64 * (1.0 - 1e-9);
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            2 * i,
            fmt_sig(before, 9),
            fmt_sig(after, 9),
            covers
        ));
    }
    out
}

/// JSON summary of the scaling derivation (config echo plus report fields).
/// Hand-rendered with fixed field order and 9-significant-digit floats so the
/// output is byte-stable.
pub fn report_json(cfg: &RopeConfig, report: &ScalingReport) -> String {
    let mut out = String::from("{\n");
    out.push_str(&format!(
        "  \"config\": {{\"base\": {}, \"head_dim\": {}, \"train_context\": {}, \"target_context\": {}, \"mode\": \"{}\"}},\n",
        fmt_sig(cfg.base, 9),
        cfg.head_dim,
        cfg.train_context,
        cfg.target_context,
        cfg.mode
    ));
    out.push_str(&format!("  \"mode\": \"{}\",\n", report.mode));
    out.push_str(&format!("  \"lambda\": {},\n", fmt_sig(report.lambda, 9)));
    out.push_str(&format!("  \"critical_dim\": {},\n", report.critical_dim));
    out.push_str(&format!(
        "  \"critical_dim_clamped\": {},\n",
        report.critical_dim_clamped
    ));
    out.push_str(&format!(
        "  \"effective_base\": {},\n",
        fmt_sig(report.effective_base, 9)
    ));
    out.push_str(&format!("  \"span_trained\": {},\n", report.span_trained));
    out.push_str(&format!("  \"span_required\": {},\n", report.span_required));
    out.push_str(&format!(
        "  \"scale_ratio\": {},\n",
        fmt_sig(report.scale_ratio, 9)
    ));
    let periods: Vec<String> = report.periods.iter().map(|p| fmt_sig(*p, 9)).collect();
    out.push_str(&format!("  \"periods\": [{}]\n", periods.join(", ")));
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn inv_frequency_midpoint_is_inverse_square_root_of_base() {
        // Pair 32 of a 128-dim head: exponent -2*32/128 = -1/2.
        let f = inv_frequencies(500_000.0, 128).unwrap();
        assert_eq!(f.len(), 64);
        assert!(rel(f[32], 1.0 / 500_000f64.sqrt()) < 1e-15);
        assert!(rel(f[32], 1.414_213_562_373_095e-3) < 1e-12);
        assert_eq!(f[0], 1.0);
        // Strictly decreasing.
        for w in f.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn critical_dimension_reference_points() {
        assert_eq!(critical_dimension(500_000.0, 128, 4096).unwrap(), 64);
        assert_eq!(critical_dimension(500_000.0, 128, 8192).unwrap(), 70);
        // Raw value 4 exceeds head_dim 2 and is clamped down.
        let span = (TAU * 10_000.0).ceil() as usize;
        assert_eq!(critical_dimension(10_000.0, 2, span).unwrap(), 2);
    }

    #[test]
    fn critical_dimension_rejects_degenerate_spans() {
        assert!(critical_dimension(10_000.0, 64, 7).is_err());
        assert!(critical_dimension(10_000.0, 64, 0).is_err());
        assert!(critical_dimension(10_000.0, 64, 8).is_ok());
        assert!(critical_dimension(1.0, 64, 4096).is_err());
        assert!(critical_dimension(10_000.0, 63, 4096).is_err());
    }

    #[test]
    fn baseline_scaling_from_4k_to_128k() {
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 128,
            train_context: 4096,
            target_context: 131_072,
            mode: NtkMode::Baseline,
        };
        let rep = scaling_factor(&cfg).unwrap();
        // Closed form: (131072 / 2pi)^(128/64) / 500000.
        let want = (131_072.0 / TAU).powf(2.0) / 500_000.0;
        assert!(rel(rep.lambda, want) < 1e-12);
        assert!(rel(rep.lambda, 870.342_340_271_701_9) < 1e-12);
        assert_eq!(rep.critical_dim, 64);
        assert!(!rep.critical_dim_clamped);
        assert_eq!(rep.span_trained, 4096);
        assert_eq!(rep.span_required, 131_072);
        assert!(rel(rep.scale_ratio, 32.0) < 1e-15);
    }

    #[test]
    fn diffusion_scaling_doubles_both_spans() {
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 128,
            train_context: 4096,
            target_context: 131_072,
            mode: NtkMode::Diffusion,
        };
        let rep = scaling_factor(&cfg).unwrap();
        let want = (262_144.0 / TAU).powf(128.0 / 70.0) / 500_000.0;
        assert!(rel(rep.lambda, want) < 1e-12);
        assert!(rel(rep.lambda, 561.937_971_459_862_3) < 1e-12);
        assert_eq!(rep.critical_dim, 70);
        assert_eq!(rep.span_trained, 8192);
        assert_eq!(rep.span_required, 262_144);
    }

    #[test]
    fn diffusion_identity_config_is_near_but_not_exactly_one() {
        // Even with target == train the diffusion rule is not the identity:
        // lambda = (8192 / 2pi)^(128/70) / 500000, slightly below 1, because
        // the doubled span's critical dimension (70) does not divide evenly.
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 128,
            train_context: 4096,
            target_context: 4096,
            mode: NtkMode::Diffusion,
        };
        let rep = scaling_factor(&cfg).unwrap();
        let want = (8192.0 / TAU).powf(128.0 / 70.0) / 500_000.0;
        assert!(rel(rep.lambda, want) < 1e-12);
        assert!(rel(rep.lambda, 0.994_063_512_889_947_8) < 1e-12);
        assert!(rep.lambda < 1.0 && rep.lambda > 0.99);
    }

    #[test]
    fn vanilla_scaling_uses_ratio_power() {
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 128,
            train_context: 4096,
            target_context: 131_072,
            mode: NtkMode::Vanilla,
        };
        let rep = scaling_factor(&cfg).unwrap();
        assert!(rel(rep.lambda, 32f64.powf(128.0 / 126.0)) < 1e-12);
        assert!(rel(rep.lambda, 33.809_694_598_244_35) < 1e-12);
        assert_eq!(rep.critical_dim, 128);

        let identity = RopeConfig::identity(500_000.0, 128, 4096);
        assert_eq!(scaling_factor(&identity).unwrap().lambda, 1.0);
    }

    #[test]
    fn critical_pair_period_meets_required_span() {
        for mode in [NtkMode::Baseline, NtkMode::Diffusion] {
            let cfg = RopeConfig {
                base: 500_000.0,
                head_dim: 128,
                train_context: 4096,
                target_context: 65_536,
                mode,
            };
            let rep = scaling_factor(&cfg).unwrap();
            let period = pair_period(rep.effective_base, 128, rep.critical_dim / 2);
            assert!(rel(period, rep.span_required as f64) < 1e-9);
        }
    }

    #[test]
    fn scaling_rejects_bad_configs() {
        let mut cfg = RopeConfig::identity(500_000.0, 128, 4096);
        cfg.target_context = 2048;
        assert!(scaling_factor(&cfg).is_err());
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 2,
            train_context: 4096,
            target_context: 8192,
            mode: NtkMode::Vanilla,
        };
        assert!(scaling_factor(&cfg).is_err());
        let cfg = RopeConfig {
            base: 0.5,
            head_dim: 128,
            train_context: 4096,
            target_context: 8192,
            mode: NtkMode::Baseline,
        };
        assert!(scaling_factor(&cfg).is_err());
    }

    #[test]
    fn rotary_application_matches_direct_trigonometry() {
        let table = RotaryTable::<f64>::new(10_000.0, 4, 16).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0];
        let p = 7;
        let got = apply_rotary(&table, &v, p).unwrap();
        let theta0: f64 = 7.0;
        let theta1: f64 = 7.0 * 10_000f64.powf(-0.5);
        let want = [
            v[0] * theta0.cos() - v[1] * theta0.sin(),
            v[0] * theta0.sin() + v[1] * theta0.cos(),
            v[2] * theta1.cos() - v[3] * theta1.sin(),
            v[2] * theta1.sin() + v[3] * theta1.cos(),
        ];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // Position 0 is the identity.
        assert_eq!(apply_rotary(&table, &v, 0).unwrap(), v.to_vec());
        // Inverse undoes apply.
        let mut round = got.clone();
        table.apply_inverse(&mut round, p);
        for (r, orig) in round.iter().zip(&v) {
            assert!((r - orig).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_rotary_checks_bounds() {
        let table = RotaryTable::<f64>::new(10_000.0, 4, 8).unwrap();
        assert!(apply_rotary(&table, &[1.0, 2.0], 0).is_err());
        assert!(apply_rotary(&table, &[1.0, 2.0, 3.0, 4.0], 8).is_err());
    }

    #[test]
    fn csv_report_has_expected_shape() {
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 128,
            train_context: 4096,
            target_context: 131_072,
            mode: NtkMode::Baseline,
        };
        let rep = scaling_factor(&cfg).unwrap();
        let csv = report_csv(&cfg, &rep);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "pair_index,dimension,period_before,period_after,covers_T_Ecap"
        );
        assert_eq!(lines.len(), 1 + 64);
        // Pair 0 always has period 2*pi on both sides and never covers a
        // multi-thousand-token span.
        assert!(lines[1].starts_with("0,0,6.28318531,6.28318531,false"));
        // From the critical pair on, the scaled period covers the span.
        for (i, line) in lines[1..].iter().enumerate() {
            let covers = line.ends_with("true");
            assert_eq!(covers, 2 * i >= rep.critical_dim, "pair {i}: {line}");
        }
    }

    #[test]
    fn json_report_parses_and_echoes_key_fields() {
        let cfg = RopeConfig {
            base: 500_000.0,
            head_dim: 128,
            train_context: 4096,
            target_context: 131_072,
            mode: NtkMode::Diffusion,
        };
        let rep = scaling_factor(&cfg).unwrap();
        let json = report_json(&cfg, &rep);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["mode"], "diffusion");
        assert_eq!(v["critical_dim"], 70);
        assert_eq!(v["span_required"], 262_144);
        assert_eq!(v["config"]["target_context"], 131_072);
        assert!(rel(v["lambda"].as_f64().unwrap(), 561.937_971) < 1e-8);
        assert_eq!(v["periods"].as_array().unwrap().len(), 64);
    }
}
