//! Image-quality metrics, symbol accuracy and the training-loss formulas.
//!
//! The losses are evaluated on given tensors / discriminator outputs only;
//! no network is trained here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsq::{DualIndices, StreamIndices};
use crate::tensor::Tensor;

/// PSNR reported for a zero-error reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("empty input")]
    Empty,
    #[error("probability {0} is outside [0, 1]")]
    BadProbability(f64),
    #[error("peak must be positive, got {0}")]
    BadPeak(f64),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall { height: usize, width: usize, window: usize },
    #[error("expected an [H, W] or [H, W, C] image, got {0:?}")]
    BadRank(Vec<usize>),
    #[error("stream {stream}: token {token} has {got} dims, expected {expected}")]
    TokenShape { stream: &'static str, token: usize, expected: usize, got: usize },
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(x_hat: &Tensor, x: &Tensor) -> Result<f64, MetricsError> {
    same_shape(x_hat, x)?;
    let sum: f64 = x_hat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// Reconstruction loss: per-element mean of the squared L2 error.
pub fn recon_loss(x_hat: &Tensor, x: &Tensor) -> Result<f64, MetricsError> {
    mse(x_hat, x)
}

/// `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn adv_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64, MetricsError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(MetricsError::Empty);
    }
    let clamp = |p: f64| -> Result<f64, MetricsError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::BadProbability(p));
        }
        Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    };
    let mut real = 0.0;
    for &p in d_real {
        real += clamp(p)?.ln();
    }
    let mut fake = 0.0;
    for &p in d_fake {
        fake += (1.0 - clamp(p)?).ln();
    }
    Ok(-real / d_real.len() as f64 - fake / d_fake.len() as f64)
}

/// Weights of the perceptual and adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn total_loss(recon: f64, perceptual: f64, adv: f64, w: LossWeights) -> f64 {
    recon + w.lambda1 * perceptual + w.lambda2 * adv
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP_DB`] when the images are identical.
pub fn psnr(x_hat: &Tensor, x: &Tensor, peak: f64) -> Result<f64, MetricsError> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(MetricsError::BadPeak(peak));
    }
    let e = mse(x_hat, x)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl SsimParams {
    /// 8x8 uniform window, `k1 = 0.01`, `k2 = 0.03`.
    pub fn with_peak(peak: f64) -> Self {
        Self { window: 8, k1: 0.01, k2: 0.03, peak }
    }
}

/// Mean SSIM over every `window x window` position (stride 1), averaged over
/// channels. Window statistics use the population (1/n) variance.
pub fn ssim(x_hat: &Tensor, x: &Tensor, params: SsimParams) -> Result<f64, MetricsError> {
    same_shape(x_hat, x)?;
    if !(params.peak.is_finite() && params.peak > 0.0) {
        return Err(MetricsError::BadPeak(params.peak));
    }
    let (h, w, c) = match *x.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(MetricsError::BadRank(x.shape().to_vec())),
    };
    let win = params.window;
    if win == 0 || h < win || w < win {
        return Err(MetricsError::ImageTooSmall { height: h, width: w, window: win });
    }
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let n = (win * win) as f64;
    let (a, b) = (x_hat.data(), x.data());
    let mut total = 0.0;
    let positions = (h - win + 1) * (w - win + 1);
    for ch in 0..c {
        let mut sum = 0.0;
        for i0 in 0..=h - win {
            for j0 in 0..=w - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + win {
                    for j in j0..j0 + win {
                        let k = (i * w + j) * c + ch;
                        let (p, q) = (a[k], b[k]);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                sum += num / den;
            }
        }
        total += sum / positions as f64;
    }
    Ok(total / c as f64)
}

/// Per-token equality of two index streams.
pub fn token_matches(sent: &StreamIndices, recovered: &StreamIndices) -> Result<Vec<bool>, MetricsError> {
    if sent.len() != recovered.len() {
        return Err(MetricsError::ShapeMismatch(vec![sent.len()], vec![recovered.len()]));
    }
    sent.iter()
        .zip(recovered)
        .enumerate()
        .map(|(t, (a, b))| {
            if a.len() != b.len() {
                return Err(MetricsError::TokenShape { stream: "", token: t, expected: a.len(), got: b.len() });
            }
            Ok(a == b)
        })
        .collect()
}

/// Token-level recovery of both streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolAccuracy {
    pub overall: f64,
    pub hi: f64,
    pub lo: f64,
    pub per_token_hi: Vec<bool>,
    pub per_token_lo: Vec<bool>,
}

fn fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 1.0;
    }
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

pub fn symbol_accuracy(sent: &DualIndices, recovered: &DualIndices) -> Result<SymbolAccuracy, MetricsError> {
    let tag = |stream: &'static str| {
        move |e: MetricsError| match e {
            MetricsError::TokenShape { token, expected, got, .. } => MetricsError::TokenShape { stream, token, expected, got },
            other => other,
        }
    };
    let hi = token_matches(&sent.hi, &recovered.hi).map_err(tag("hi"))?;
    let lo = token_matches(&sent.lo, &recovered.lo).map_err(tag("lo"))?;
    let mut all = hi.clone();
    all.extend_from_slice(&lo);
    Ok(SymbolAccuracy { overall: fraction(&all), hi: fraction(&hi), lo: fraction(&lo), per_token_hi: hi, per_token_lo: lo })
}
