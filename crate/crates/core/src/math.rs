//! Scalar abstraction, dense linear algebra on flat row-major slices, seed
//! derivation, and number formatting for reports.
//!
//! Every loop here is written so results are bitwise reproducible: fixed
//! iteration order, no reassociating reductions, no thread-dependent state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Floating-point scalar the model and trainer are generic over.
///
/// `f32` is the working precision; `f64` exists so gradients can be checked
/// against finite differences without drowning in rounding noise.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// dst(l×n) += a(l×m) · b(m×n).
///
/// i-k-j loop order: the inner loop walks contiguous rows of `b` and `dst`,
/// which keeps the accumulation chains independent per output element and lets
/// the compiler vectorize without reassociating anything.
pub fn matmul_acc<T: Real>(dst: &mut [T], a: &[T], b: &[T], l: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), l * m);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(dst.len(), l * n);
    for i in 0..l {
        let dst_row = &mut dst[i * n..(i + 1) * n];
        for k in 0..m {
            let s = a[i * m + k];
            if s == T::zero() {
                continue;
            }
            let b_row = &b[k * n..(k + 1) * n];
            for j in 0..n {
                dst_row[j] = dst_row[j] + s * b_row[j];
            }
        }
    }
}

/// a(l×m) · b(m×n), freshly allocated.
pub fn matmul<T: Real>(a: &[T], b: &[T], l: usize, m: usize, n: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); l * n];
    matmul_acc(&mut dst, a, b, l, m, n);
    dst
}

/// dst(m×n) += aᵀ · b where a is stored (l×m) and b is (l×n).
///
/// Used for weight gradients (inputᵀ · upstream); same vectorizable inner
/// structure as [`matmul_acc`].
pub fn matmul_at_b_acc<T: Real>(dst: &mut [T], a: &[T], b: &[T], l: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), l * m);
    debug_assert_eq!(b.len(), l * n);
    debug_assert_eq!(dst.len(), m * n);
    for i in 0..l {
        let b_row = &b[i * n..(i + 1) * n];
        for k in 0..m {
            let s = a[i * m + k];
            if s == T::zero() {
                continue;
            }
            let dst_row = &mut dst[k * n..(k + 1) * n];
            for j in 0..n {
                dst_row[j] = dst_row[j] + s * b_row[j];
            }
        }
    }
}

/// Row-major transpose: a(rows×cols) → (cols×rows).
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// SplitMix64 finalizer; good avalanche, cheap.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse a list of seed components (master seed, purpose tag, step, index,
/// ...) into one 64-bit stream seed.
///
/// All randomness in the crate is derived statelessly through this function,
/// which is what makes checkpoint resumption and thread-count independence
/// exact: the RNG for any (purpose, step, slot) never depends on what was
/// drawn before it.
pub fn mix_seeds(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x51_7c_c1_b7_27_22_0a_95, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Fresh RNG for a derived stream. ChaCha8 is deterministic across platforms.
pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seeds(parts))
}

/// Stream-purpose tags used with [`mix_seeds`]; distinct constants keep the
/// derived streams disjoint.
pub mod stream {
    pub const INIT: u64 = 0x01;
    pub const DATA_ORDER: u64 = 0x02;
    pub const NOISE: u64 = 0x03;
    pub const PPL: u64 = 0x04;
    pub const NIAH: u64 = 0x05;
    pub const DECODE: u64 = 0x06;
}

/// Format `x` with `sig` significant digits, `%g`-style: positional for
/// moderate exponents, scientific otherwise, trailing zeros stripped.
/// Deterministic (no locale involvement), so report files are byte-stable.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    assert!(sig >= 1, "need at least one significant digit");
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    // Round to `sig` digits via the exponential formatter, then re-render.
    let e = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = e.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= sig as i32 {
        // Scientific: strip trailing zeros from the mantissa.
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        return format!("{mant}e{exp}");
    }
    // Positional with exactly enough decimals for `sig` significant digits.
    let decimals = (sig as i32 - 1 - exp).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
