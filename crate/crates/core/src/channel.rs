//! AWGN channel simulation.
//!
//! Noise is added to scaled-domain FSQ representatives. In [`NoiseMode::SnrDb`]
//! the noise power is set relative to the empirical mean square of the payload
//! passed to that call; in [`NoiseMode::FixedSigma`] it is absolute.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, SeededStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("signal power must be positive to define an SNR, got {0}")]
    ZeroSignalPower(f64),
    #[error("empty payload has no defined power")]
    EmptyPayload,
    #[error("fixed sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("snr must be finite, got {0}")]
    BadSnr(f64),
    #[error("payload contains a non-finite value at index {0}")]
    NonFinitePayload(usize),
}

/// How the noise level is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// SNR in dB relative to the payload's measured power.
    SnrDb(f64),
    /// Absolute noise standard deviation.
    FixedSigma(f64),
    /// Pass-through.
    Noiseless,
}

impl NoiseMode {
    pub fn validate(self) -> Result<Self, ChannelError> {
        match self {
            NoiseMode::SnrDb(s) if !s.is_finite() => Err(ChannelError::BadSnr(s)),
            NoiseMode::FixedSigma(s) if !(s.is_finite() && s > 0.0) => Err(ChannelError::BadSigma(s)),
            m => Ok(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub mode: NoiseMode,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(mode: NoiseMode, seed: u64) -> Result<Self, ChannelError> {
        Ok(Self { mode: mode.validate()?, seed })
    }
}

/// `sqrt(signal_power * 10^(-snr_db / 10))`.
pub fn sigma_from_snr(signal_power: f64, snr_db: f64) -> Result<f64, ChannelError> {
    if !(signal_power.is_finite() && signal_power > 0.0) {
        return Err(ChannelError::ZeroSignalPower(signal_power));
    }
    if !snr_db.is_finite() {
        return Err(ChannelError::BadSnr(snr_db));
    }
    Ok((signal_power * 10f64.powf(-snr_db / 10.0)).sqrt())
}

/// Output of one channel use.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub output: Tensor,
    /// Noise standard deviation applied.
    pub sigma: f64,
    /// Mean square of the payload.
    pub signal_power: f64,
    /// Mean square of the noise actually drawn.
    pub noise_power: f64,
}

impl Transmission {
    /// `10 log10(signal / noise)` from the realized noise; infinite when noiseless.
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (self.signal_power / self.noise_power).log10()
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every payload element.
pub fn transmit<R: Rng + ?Sized>(payload: &Tensor, mode: NoiseMode, rng: &mut R) -> Result<Transmission, ChannelError> {
    let mode = mode.validate()?;
    if let Some(i) = payload.data().iter().position(|v| !v.is_finite()) {
        return Err(ChannelError::NonFinitePayload(i));
    }
    let signal_power = payload.mean_square();
    let sigma = match mode {
        NoiseMode::SnrDb(snr) => {
            if payload.is_empty() {
                return Err(ChannelError::EmptyPayload);
            }
            sigma_from_snr(signal_power, snr)?
        }
        NoiseMode::FixedSigma(s) => s,
        NoiseMode::Noiseless => 0.0,
    };
    let mut output = payload.clone();
    let mut noise_sq = 0.0;
    if sigma > 0.0 {
        for v in output.data_mut() {
            let n = sigma * rng.sample::<f64, _>(StandardNormal);
            noise_sq += n * n;
            *v += n;
        }
    }
    let noise_power = if payload.is_empty() { 0.0 } else { noise_sq / payload.len() as f64 };
    Ok(Transmission { output, sigma, signal_power, noise_power })
}

/// A channel instance owning its random stream.
#[derive(Debug, Clone)]
pub struct AwgnChannel {
    mode: NoiseMode,
    stream: SeededStream,
}

impl AwgnChannel {
    pub fn new(cfg: ChannelConfig) -> Self {
        Self { mode: cfg.mode, stream: rng::stream(cfg.seed) }
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn transmit(&mut self, payload: &Tensor) -> Result<Transmission, ChannelError> {
        transmit(payload, self.mode, &mut self.stream)
    }
}
