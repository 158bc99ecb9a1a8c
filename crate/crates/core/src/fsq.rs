//! Finite scalar quantization.
//!
//! Each latent dimension `i` with `m_i` levels is processed independently:
//!
//! ```text
//! h_i      = (m_i - 1)(1 + eps) / 2
//! o_i      = 0.5 if m_i is even, else 0
//! s_i      = atanh(o_i / h_i)
//! bounded  = alpha * (tanh(z + s_i) * h_i - o_i)
//! level    = round(bounded / alpha)            (half away from zero)
//! scaled   = level * alpha
//! norm     = scaled / (alpha * h_i)
//! ```
//!
//! Levels are the integers `-floor(m/2) ..= ceil(m/2) - 1`; for odd `m` this is
//! the symmetric set `{-k..k}`, for even `m` the offset construction shifts the
//! set down by one half step so that `m` integers are reachable. The index of a
//! level is `level + floor(m/2)`, which maps both cases onto `0..m`.
//!
//! The bounded value for dimension `i` always lies in the open interval
//! `(-alpha (h_i + o_i), alpha (h_i - o_i))`; [`requantize`] clamps received
//! values into the closure of that interval before rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default stability margin.
pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FsqError {
    #[error("no quantization levels given")]
    EmptyLevels,
    #[error("dimension {dim} has {levels} levels, need at least 2")]
    TooFewLevels { dim: usize, levels: u32 },
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("epsilon {epsilon} too large for {levels} levels: saturated inputs would round past the outer level")]
    EpsilonTooLarge { levels: u32, epsilon: f64 },
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension {0} out of range")]
    NoSuchDimension(usize),
    #[error("non-finite input {value} in dimension {dim}")]
    NonFinite { dim: usize, value: f64 },
    #[error("index {index} out of range for {levels} levels in dimension {dim}")]
    IndexOutOfRange { dim: usize, index: u32, levels: u32 },
}

/// Per-dimension level counts plus span scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    levels: Vec<u32>,
    alpha: f64,
    epsilon: f64,
}

impl QuantizerConfig {
    pub fn new(levels: Vec<u32>, alpha: f64, epsilon: f64) -> Result<Self, FsqError> {
        if levels.is_empty() {
            return Err(FsqError::EmptyLevels);
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(FsqError::BadAlpha(alpha));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(FsqError::BadEpsilon(epsilon));
        }
        for (dim, &m) in levels.iter().enumerate() {
            if m < 2 {
                return Err(FsqError::TooFewLevels { dim, levels: m });
            }
            // The outer bound sits (m - 1) * eps / 2 past the outer level; it
            // must stay under half a step or the clamp would round outward.
            if f64::from(m - 1) * epsilon >= 1.0 {
                return Err(FsqError::EpsilonTooLarge { levels: m, epsilon });
            }
        }
        Ok(Self { levels, alpha, epsilon })
    }

    /// `levels` with the default epsilon.
    pub fn with_alpha(levels: Vec<u32>, alpha: f64) -> Result<Self, FsqError> {
        Self::new(levels, alpha, DEFAULT_EPSILON)
    }

    /// Five dimensions of five levels, alpha = 2.
    pub fn paper_default() -> Self {
        Self::with_alpha(vec![5; 5], 2.0).expect("static config is valid")
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of quantized dimensions.
    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    /// Size of the implicit product codebook.
    pub fn codebook_size(&self) -> u128 {
        self.levels.iter().map(|&m| u128::from(m)).product()
    }

    /// Half-width `h` of the unscaled bounding range.
    pub fn half_width(&self, dim: usize) -> f64 {
        f64::from(self.levels[dim] - 1) * (1.0 + self.epsilon) / 2.0
    }

    /// Offset `o`: 0.5 for even level counts, 0 for odd.
    pub fn offset(&self, dim: usize) -> f64 {
        if self.levels[dim].is_multiple_of(2) {
            0.5
        } else {
            0.0
        }
    }

    /// Shift `s = atanh(o / h)`.
    pub fn shift(&self, dim: usize) -> f64 {
        (self.offset(dim) / self.half_width(dim)).atanh()
    }

    /// `floor(m / 2)`: index of level zero.
    pub fn center_index(&self, dim: usize) -> u32 {
        self.levels[dim] / 2
    }

    /// Smallest and largest integer level of a dimension.
    pub fn level_range(&self, dim: usize) -> (i64, i64) {
        let m = i64::from(self.levels[dim]);
        (-(m / 2), m - 1 - m / 2)
    }

    /// Closed scaled-domain interval the bounded values live in.
    pub fn scaled_span(&self, dim: usize) -> (f64, f64) {
        let h = self.half_width(dim);
        let o = self.offset(dim);
        (-self.alpha * (h + o), self.alpha * (h - o))
    }

    /// True when `index` is neither the lowest nor the highest level.
    pub fn is_interior(&self, dim: usize, index: u32) -> bool {
        index > 0 && index + 1 < self.levels[dim]
    }

    fn check_dim(&self, dim: usize) -> Result<(), FsqError> {
        if dim < self.levels.len() {
            Ok(())
        } else {
            Err(FsqError::NoSuchDimension(dim))
        }
    }
}

/// A value after bounding and span scaling.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BoundedValue(f64);

impl BoundedValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// One quantized token: level indices plus both representative forms.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCode {
    pub indices: Vec<u32>,
    pub scaled_values: Vec<f64>,
    pub normalized_values: Vec<f64>,
}

/// Level indices of one token stream, one row per token.
pub type StreamIndices = Vec<Vec<u32>>;

/// Index rows of the Hi and Lo streams.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DualIndices {
    pub hi: StreamIndices,
    pub lo: StreamIndices,
}

/// `alpha * (tanh(z + s) * h - o)` for one dimension.
pub fn bound(z: f64, dim: usize, cfg: &QuantizerConfig) -> Result<BoundedValue, FsqError> {
    cfg.check_dim(dim)?;
    if !z.is_finite() {
        return Err(FsqError::NonFinite { dim, value: z });
    }
    let h = cfg.half_width(dim);
    let o = cfg.offset(dim);
    let s = cfg.shift(dim);
    Ok(BoundedValue(cfg.alpha * ((z + s).tanh() * h - o)))
}

/// Rounds a bounded value to its level; returns `(index, scaled_value)`.
pub fn quantize(b: BoundedValue, dim: usize, cfg: &QuantizerConfig) -> Result<(u32, f64), FsqError> {
    cfg.check_dim(dim)?;
    Ok(quantize_unchecked(b.0, dim, cfg))
}

fn quantize_unchecked(b: f64, dim: usize, cfg: &QuantizerConfig) -> (u32, f64) {
    let (lo, hi) = cfg.level_range(dim);
    // f64::round is half-away-from-zero.
    let level = ((b / cfg.alpha).round() as i64).clamp(lo, hi);
    let index = (level + i64::from(cfg.center_index(dim))) as u32;
    (index, level as f64 * cfg.alpha)
}

/// `scaled / (alpha * h)`.
pub fn normalize(scaled_value: f64, dim: usize, cfg: &QuantizerConfig) -> Result<f64, FsqError> {
    cfg.check_dim(dim)?;
    Ok(normalize_unchecked(scaled_value, dim, cfg))
}

fn normalize_unchecked(scaled_value: f64, dim: usize, cfg: &QuantizerConfig) -> f64 {
    scaled_value / (cfg.alpha * cfg.half_width(dim))
}

/// Full encoder-side chain: bound, quantize, normalize.
pub fn fsq_forward(z: &[f64], cfg: &QuantizerConfig) -> Result<TokenCode, FsqError> {
    check_len(z.len(), cfg)?;
    let mut code = TokenCode::with_capacity(cfg.dims());
    for (dim, &zi) in z.iter().enumerate() {
        let b = bound(zi, dim, cfg)?;
        let (index, scaled) = quantize_unchecked(b.0, dim, cfg);
        code.push(index, scaled, normalize_unchecked(scaled, dim, cfg));
    }
    Ok(code)
}

/// Receiver-side chain: clamp into the span, quantize, normalize.
///
/// Received values may lie outside the span (channel noise is unbounded);
/// they are clamped rather than rejected. Non-finite values are an error.
pub fn requantize(received: &[f64], cfg: &QuantizerConfig) -> Result<TokenCode, FsqError> {
    check_len(received.len(), cfg)?;
    let mut code = TokenCode::with_capacity(cfg.dims());
    for (dim, &y) in received.iter().enumerate() {
        if !y.is_finite() {
            return Err(FsqError::NonFinite { dim, value: y });
        }
        let (lo, hi) = cfg.scaled_span(dim);
        let (index, scaled) = quantize_unchecked(y.clamp(lo, hi), dim, cfg);
        code.push(index, scaled, normalize_unchecked(scaled, dim, cfg));
    }
    Ok(code)
}

/// Indices only; the hot path for Monte Carlo loops.
pub fn requantize_indices(received: &[f64], cfg: &QuantizerConfig, out: &mut [u32]) {
    debug_assert_eq!(received.len(), cfg.dims());
    for (dim, (&y, slot)) in received.iter().zip(out.iter_mut()).enumerate() {
        let (lo, hi) = cfg.scaled_span(dim);
        *slot = quantize_unchecked(y.clamp(lo, hi), dim, cfg).0;
    }
}

/// Rebuilds the full token code from level indices.
pub fn code_from_indices(indices: &[u32], cfg: &QuantizerConfig) -> Result<TokenCode, FsqError> {
    check_len(indices.len(), cfg)?;
    let mut code = TokenCode::with_capacity(cfg.dims());
    for (dim, &index) in indices.iter().enumerate() {
        let scaled = scaled_value_of(index, dim, cfg)?;
        code.push(index, scaled, normalize_unchecked(scaled, dim, cfg));
    }
    Ok(code)
}

/// Scaled-domain representative of `index`: `(index - floor(m/2)) * alpha`.
pub fn scaled_value_of(index: u32, dim: usize, cfg: &QuantizerConfig) -> Result<f64, FsqError> {
    cfg.check_dim(dim)?;
    let m = cfg.levels[dim];
    if index >= m {
        return Err(FsqError::IndexOutOfRange { dim, index, levels: m });
    }
    let level = i64::from(index) - i64::from(cfg.center_index(dim));
    Ok(level as f64 * cfg.alpha)
}

/// Every codeword of the product codebook, dimension 0 varying fastest.
pub fn enumerate_codewords(cfg: &QuantizerConfig) -> impl Iterator<Item = Vec<u32>> + '_ {
    let total = cfg.codebook_size();
    (0..total).map(move |mut n| {
        cfg.levels
            .iter()
            .map(|&m| {
                let i = (n % u128::from(m)) as u32;
                n /= u128::from(m);
                i
            })
            .collect()
    })
}

fn check_len(len: usize, cfg: &QuantizerConfig) -> Result<(), FsqError> {
    if len == cfg.dims() {
        Ok(())
    } else {
        Err(FsqError::DimensionMismatch { expected: cfg.dims(), got: len })
    }
}

impl TokenCode {
    fn with_capacity(n: usize) -> Self {
        Self { indices: Vec::with_capacity(n), scaled_values: Vec::with_capacity(n), normalized_values: Vec::with_capacity(n) }
    }

    fn push(&mut self, index: u32, scaled: f64, normalized: f64) {
        self.indices.push(index);
        self.scaled_values.push(scaled);
        self.normalized_values.push(normalized);
    }

    /// True when every dimension sits on an interior level.
    pub fn is_interior(&self, cfg: &QuantizerConfig) -> bool {
        self.indices.iter().enumerate().all(|(d, &i)| cfg.is_interior(d, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(levels: &[u32], alpha: f64) -> QuantizerConfig {
        QuantizerConfig::with_alpha(levels.to_vec(), alpha).unwrap()
    }

    #[test]
    fn derived_constants() {
        let c = cfg(&[5, 4], 1.0);
        assert_abs_diff_eq!(c.half_width(0), 2.002, epsilon = 1e-15);
        assert_eq!(c.offset(0), 0.0);
        assert_eq!(c.shift(0), 0.0);
        assert_abs_diff_eq!(c.half_width(1), 1.5015, epsilon = 1e-15);
        assert_eq!(c.offset(1), 0.5);
        assert_abs_diff_eq!(c.shift(1).tanh() * c.half_width(1), 0.5, epsilon = 1e-15);
        assert_eq!(c.level_range(0), (-2, 2));
        assert_eq!(c.level_range(1), (-2, 1));
    }

    #[test]
    fn bound_examples() {
        assert_eq!(bound(0.0, 0, &cfg(&[5], 2.0)).unwrap().value(), 0.0);
        assert_abs_diff_eq!(bound(0.0, 0, &cfg(&[4], 1.0)).unwrap().value(), 0.0, epsilon = 1e-15);
        // 2 * tanh(1) * 2.002, mpmath at 40 digits.
        assert_abs_diff_eq!(bound(1.0, 0, &cfg(&[5], 2.0)).unwrap().value(), 3.049_423_000_446_882_5, epsilon = 1e-12);
    }

    #[test]
    fn bound_rejects_non_finite() {
        let c = cfg(&[5], 2.0);
        assert!(matches!(bound(f64::NAN, 0, &c), Err(FsqError::NonFinite { .. })));
        assert!(matches!(bound(f64::INFINITY, 0, &c), Err(FsqError::NonFinite { .. })));
        assert!(matches!(bound(0.0, 1, &c), Err(FsqError::NoSuchDimension(1))));
    }

    #[test]
    fn quantize_examples() {
        let c = cfg(&[5], 2.0);
        assert_eq!(quantize(BoundedValue(3.04964), 0, &c).unwrap(), (4, 4.0));
        assert_eq!(quantize(BoundedValue(0.0), 0, &c).unwrap(), (2, 0.0));
        assert_eq!(quantize(BoundedValue(-4.004), 0, &c).unwrap(), (0, -4.0));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let c = cfg(&[5], 1.0);
        assert_eq!(quantize(BoundedValue(0.5), 0, &c).unwrap(), (3, 1.0));
        assert_eq!(quantize(BoundedValue(-0.5), 0, &c).unwrap(), (1, -1.0));
        assert_eq!(quantize(BoundedValue(1.5), 0, &c).unwrap(), (4, 2.0));
    }

    #[test]
    fn normalize_examples() {
        let c = cfg(&[5], 2.0);
        assert_abs_diff_eq!(normalize(4.0, 0, &c).unwrap(), 0.999000999000999, epsilon = 1e-14);
        assert_eq!(normalize(0.0, 0, &c).unwrap(), 0.0);
        assert_abs_diff_eq!(normalize(-4.0, 0, &c).unwrap(), -0.999000999000999, epsilon = 1e-14);
    }

    #[test]
    fn forward_examples() {
        let c = cfg(&[5; 5], 2.0);
        let zero = fsq_forward(&[0.0; 5], &c).unwrap();
        assert_eq!(zero.indices, vec![2; 5]);
        assert!(zero.normalized_values.iter().all(|&v| v == 0.0));

        let big = fsq_forward(&[100.0; 5], &c).unwrap();
        assert_eq!(big.indices, vec![4; 5]);
        for v in big.normalized_values {
            assert_abs_diff_eq!(v, 0.999000999000999, epsilon = 1e-14);
        }

        let mixed = fsq_forward(&[1.0, -1.0, 0.5, 0.0, 0.0], &c).unwrap();
        assert_eq!(mixed.indices, vec![4, 0, 3, 2, 2]);
        assert_eq!(mixed.scaled_values, vec![4.0, -4.0, 2.0, 0.0, 0.0]);

        assert_eq!(fsq_forward(&[0.0; 4], &c), Err(FsqError::DimensionMismatch { expected: 5, got: 4 }));
    }

    #[test]
    fn requantize_examples() {
        let c = cfg(&[5; 5], 2.0);
        let sent = [4.0, 0.0, 2.0, 0.0, 0.0];
        let noise = [0.4, -0.3, 0.2, 0.0, 0.0];
        let rx: Vec<f64> = sent.iter().zip(noise).map(|(a, b)| a + b).collect();
        assert_eq!(requantize(&rx, &c).unwrap(), requantize(&sent, &c).unwrap());

        let one = cfg(&[5], 2.0);
        let shifted = requantize(&[1.2], &one).unwrap();
        assert_eq!(shifted.indices, vec![3]);
        assert_eq!(shifted.scaled_values, vec![2.0]);

        let clamped = requantize(&[9.7], &one).unwrap();
        assert_eq!(clamped.indices, vec![4]);
        assert_eq!(clamped.scaled_values, vec![4.0]);
        assert_eq!(requantize(&[-1e300], &one).unwrap().indices, vec![0]);
        assert!(requantize(&[f64::NAN], &one).is_err());
    }

    #[test]
    fn even_level_affine_map_is_exhaustive() {
        for m in [2u32, 4, 6] {
            let c = cfg(&[m], 1.5);
            let half = i64::from(m / 2);
            for index in 0..m {
                let level = i64::from(index) - half;
                let scaled = scaled_value_of(index, 0, &c).unwrap();
                assert_eq!(scaled, level as f64 * 1.5);
                assert_eq!(requantize(&[scaled], &c).unwrap().indices, vec![index]);
            }
            // Saturated tanh lands on the outer levels.
            assert_eq!(fsq_forward(&[50.0], &c).unwrap().indices, vec![m - 1]);
            assert_eq!(fsq_forward(&[-50.0], &c).unwrap().indices, vec![0]);
            assert!(scaled_value_of(m, 0, &c).is_err());
        }
    }

    #[test]
    fn codebook_cardinality() {
        let c = cfg(&[3, 3], 1.0);
        let codes: std::collections::BTreeSet<Vec<u32>> = enumerate_codewords(&c).collect();
        assert_eq!(codes.len(), 9);
        let c = cfg(&[5, 4, 2], 2.0);
        let codes: std::collections::BTreeSet<Vec<u32>> = enumerate_codewords(&c).collect();
        assert_eq!(codes.len() as u128, c.codebook_size());
        assert_eq!(c.codebook_size(), 40);
    }

    #[test]
    fn config_validation() {
        assert_eq!(QuantizerConfig::new(vec![], 1.0, 1e-3), Err(FsqError::EmptyLevels));
        assert_eq!(QuantizerConfig::new(vec![5, 1], 1.0, 1e-3), Err(FsqError::TooFewLevels { dim: 1, levels: 1 }));
        assert!(matches!(QuantizerConfig::new(vec![5], 0.0, 1e-3), Err(FsqError::BadAlpha(_))));
        assert!(matches!(QuantizerConfig::new(vec![5], 1.0, 0.0), Err(FsqError::BadEpsilon(_))));
        assert!(matches!(QuantizerConfig::new(vec![5], 1.0, 0.3), Err(FsqError::EpsilonTooLarge { .. })));
    }

    proptest! {
        #[test]
        fn bound_stays_inside_span(z in -1e6f64..1e6, m in 2u32..12, alpha in 0.1f64..8.0) {
            let c = cfg(&[m], alpha);
            let b = bound(z, 0, &c).unwrap().value();
            let (lo, hi) = c.scaled_span(0);
            prop_assert!(b >= lo && b <= hi);
            if m % 2 == 1 {
                prop_assert!(b.abs() <= alpha * c.half_width(0));
            }
        }

        #[test]
        fn bound_is_monotone(z in -5.0f64..5.0, dz in 1e-6f64..1.0, m in 2u32..12) {
            let c = cfg(&[m], 2.0);
            let a = bound(z, 0, &c).unwrap();
            let b = bound(z + dz, 0, &c).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn quantization_error_is_at_most_half_step(z in -10.0f64..10.0, m in 2u32..12, alpha in 0.1f64..8.0) {
            let c = cfg(&[m], alpha);
            let b = bound(z, 0, &c).unwrap();
            let (index, scaled) = quantize(b, 0, &c).unwrap();
            prop_assert!(index < m);
            prop_assert!((b.value() - scaled).abs() <= alpha / 2.0 + 1e-12);
        }

        #[test]
        fn odd_normalized_values_in_unit_interval(z in proptest::collection::vec(-20.0f64..20.0, 3)) {
            let c = cfg(&[3, 5, 7], 2.0);
            let code = fsq_forward(&z, &c).unwrap();
            prop_assert!(code.normalized_values.iter().all(|v| v.abs() <= 1.0));
        }
    }
}
