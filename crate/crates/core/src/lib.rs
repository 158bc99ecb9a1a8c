//! Noise-resilient semantic transport over finite scalar quantization.
//!
//! The crate provides:
//!
//! - [`fsq`]: the bounded / scaled / rounded quantizer and its receiver-side
//!   requantization,
//! - [`theory`]: closed-form correct-quantization probabilities under AWGN and
//!   Monte Carlo estimators that check them against the real codec,
//! - [`channel`]: an AWGN channel driven by SNR or a fixed sigma,
//! - [`tensor`] and [`nn`]: the dense kernels behind [`hilo`], a forward-only
//!   high / low frequency transformer with dual FSQ token streams,
//! - [`frame`]: a bit-exact wire format for the token streams,
//! - [`metrics`]: PSNR, SSIM, symbol accuracy and loss formulas.
//!
//! All randomness flows through [`rng::SeededStream`], so every output is a
//! function of its inputs and seeds.

pub mod channel;
pub mod frame;
pub mod fsq;
pub mod hilo;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use channel::{AwgnChannel, ChannelConfig, NoiseMode};
pub use fsq::{DualIndices, QuantizerConfig, TokenCode};
pub use hilo::{DualStream, HiLoConfig};
pub use tensor::Tensor;
